"""Reference-monitor behavior at the ABI level, driven through a booted
simulation so page tables, processes and bookkeeping are all real."""

import pytest

from blindfold_sim.guardian import FrameState, Status, VmaStatus
from blindfold_sim.harness import Simulation, sweep_confidentiality
from blindfold_sim.layout import (
    HEAP_VA,
    PAGE_SIZE,
    STACK_TOP,
    direct_map_va,
    vpn_of,
)
from blindfold_sim.runtime import Config
from blindfold_sim.simhw import Fault, Mode, Pte, VmcField


@pytest.fixture
def sim():
    return Simulation(2, Config(frame_count=1024))


@pytest.fixture
def live(sim):
    """A running sensitive task with one touched heap page."""
    task = sim.spawn("t1", "demo", True)
    sim.kernel.do_syscall(task, "brk", [HEAP_VA + 4 * PAGE_SIZE])
    sim.kernel.user_write(task, HEAP_VA, b"heap-page-contents")
    return sim, task, sim.guardian.by_user_root[task.user_root]


def brute_force_refcounts(sim):
    """Independent full-walk recount of leaf mappings per frame."""
    counts = [0] * sim.machine.phys.frame_count
    roots = set(sim.guardian.table_kind) - {sim.guardian.io_root}
    for root in roots:
        if sim.guardian.table_meta[root][1] != 1:
            continue
        words = sim.machine.phys.read_table(root)
        for w in words:
            if not w & 1:
                continue
            for lw in sim.machine.phys.read_table(w >> 12):
                if lw & 1:
                    counts[lw >> 12] += 1
    for idx, pte in sim.guardian.io_entries():
        counts[pte.frame_no] += 1
    return counts


# -- vm control -----------------------------------------------------------------


def test_kernel_ptbr_points_at_cloak_after_trap(live):
    sim, task, proc = live
    sim.kernel.park_current()
    sim.machine.set_vm_control(VmcField.PTBR_USER, task.user_root, Mode.KERNEL)
    assert sim.machine.vmc.ptbr_user == proc.cloak_ptbr  # silently substituted


def test_kernel_ptbr_kernel_rejected(sim):
    res = sim.machine.set_vm_control(VmcField.PTBR_KERNEL, 99, Mode.KERNEL)
    assert res.status is Status.REJECTED
    assert sim.machine.vmc.ptbr_kernel == sim.guardian.kernel_root


def test_first_sight_table_lockdown_marks_frames(sim):
    k = sim.kernel
    root = k.alloc_frame()
    k.kwrite_frame(root, bytes(PAGE_SIZE))
    l2 = k.alloc_frame()
    k.kwrite_frame(l2, bytes(PAGE_SIZE))
    k._raw_map(root, 0x400, Pte(True, True, True, k.alloc_frame()))
    sim.machine.set_vm_control(VmcField.PTBR_USER, root, Mode.KERNEL)
    assert sim.guardian.frame_info[root].state is FrameState.PT_PAGE
    # table frames lose their writable kernel mapping
    with pytest.raises(Fault):
        k.kwrite(root * PAGE_SIZE, b"\x00" * 4)


def test_lockdown_strips_foreign_sensitive_mappings(live):
    sim, task, proc = live
    k = sim.kernel
    victim_frame = task.pages[vpn_of(HEAP_VA)]
    root = k.alloc_frame()
    k.kwrite_frame(root, bytes(PAGE_SIZE))
    k._raw_map(root, 0x123, Pte(True, True, True, victim_frame))
    res = sim.guardian.lockdown_page_table(root, "user")
    assert res.ok
    assert sim.machine.walk(root, 0x123 << 12) is None  # mapping invalidated
    assert sim.guardian.frame_info[victim_frame].refcount == 1


def test_lockdown_idempotent(live):
    sim, task, proc = live
    before = [f.refcount for f in sim.guardian.frame_info]
    assert sim.guardian.lockdown_page_table(task.user_root, "user").ok
    assert before == [f.refcount for f in sim.guardian.frame_info]


def test_refcounts_match_brute_force_recount(live):
    sim, task, proc = live
    k = sim.kernel
    k.swap_out(task, vpn_of(HEAP_VA))
    k.swap_in(task, vpn_of(HEAP_VA))
    k.migrate_page(task, vpn_of(HEAP_VA))
    counts = brute_force_refcounts(sim)
    for fno, info in enumerate(sim.guardian.frame_info):
        assert info.refcount == counts[fno], fno


# -- view transitions ----------------------------------------------------------


def test_swap_roundtrip_restores_bytes_and_hides_frame(live):
    sim, task, proc = live
    k = sim.kernel
    vpn = vpn_of(HEAP_VA)
    snapshot = k.user_read(task, HEAP_VA, PAGE_SIZE)
    k.swap_out(task, vpn)
    slot = k.swap[task.swapped[vpn]]
    assert slot.data != snapshot  # kernel's view is ciphertext
    assert k.swap_in(task, vpn)
    assert k.user_read(task, HEAP_VA, PAGE_SIZE) == snapshot
    frame = task.pages[vpn]
    assert sim.guardian.frame_info[frame].state is FrameState.SENSITIVE_CLEAR
    with pytest.raises(Fault):
        k.kread(frame * PAGE_SIZE, 16)  # direct map invalidated


def test_replayed_ciphertext_rejected(live):
    sim, task, proc = live
    k = sim.kernel
    vpn = vpn_of(HEAP_VA)
    k.swap_out(task, vpn)
    stale = k.swap[task.swapped[vpn]].data
    k.swap_in(task, vpn)
    k.swap_out(task, vpn)
    sid = task.swapped[vpn]
    k.swap[sid] = k.swap[sid].__class__(sid, stale, (task.tid, vpn), True, False)
    assert not k.swap_in(task, vpn)
    assert sim.ctx.counters["violations"] == 1
    assert vpn in proc.seal_meta  # page stays sealed after the failure


def test_map_normal_frame_into_plain_task_no_crypto(sim):
    task = sim.spawn("p1", "demo", False)
    before = (sim.ctx.counters["seal_ops"], sim.ctx.counters["open_ops"], sim.ctx.counters["digest_ops"])
    sim.kernel.do_syscall(task, "brk", [HEAP_VA + PAGE_SIZE])
    sim.kernel.user_write(task, HEAP_VA, b"plain")
    after = (sim.ctx.counters["seal_ops"], sim.ctx.counters["open_ops"], sim.ctx.counters["digest_ops"])
    assert before == after


def test_guardian_owned_frame_mapping_rejected(live):
    sim, task, proc = live
    gframe = sim.guardian.guardian_frames.start
    res = sim.kernel.set_pte(task, task.user_root, vpn_of(HEAP_VA) + 1, Pte(True, True, True, gframe))
    assert res.status is Status.REJECTED


def test_demand_anon_zero_filled_by_guardian(live):
    sim, task, proc = live
    k = sim.kernel
    fno = k.free_frames[-1]
    k.kwrite_frame(fno, b"K" * PAGE_SIZE)  # kernel-chosen garbage
    assert k.user_read(task, HEAP_VA + PAGE_SIZE, 16) == bytes(16)


# -- interrupts, resumption, capabilities ----------------------------------------


def test_interrupt_zeroes_kernel_view_and_rewrites_pc(live):
    sim, task, proc = live
    k = sim.kernel
    seen = {}
    orig = k.syscall_dispatch

    def spy(t, sid, args, tf):
        seen["gprs"] = list(tf.gprs)
        seen["pc"] = tf.pc
        return orig(t, sid, args, tf)

    k.syscall_dispatch = spy
    k.do_syscall(task, "brk", [0])
    k.syscall_dispatch = orig
    assert seen["gprs"] == [0] * 8
    assert seen["pc"] == proc.trampoline_va


def test_syscall_creates_and_destroys_buffer_cap(live):
    sim, task, proc = live
    k = sim.kernel
    caps_during = {}
    orig = k.syscall_dispatch

    def spy(t, sid, args, tf):
        caps_during["caps"] = [(c.addr, c.size) for c in proc.caps.all_caps()]
        return orig(t, sid, args, tf)

    k.syscall_dispatch = spy
    k.user_write(task, 0x0080_0000, b"f\0")
    k.do_syscall(task, "read", [9, HEAP_VA, 64])
    k.syscall_dispatch = orig
    assert (HEAP_VA, 64) in caps_during["caps"]          # derived from the args
    assert any(size == 512 for _, size in caps_during["caps"])  # stack-top grant
    assert len(proc.caps) == 0                            # destroyed at resume


def test_normal_resume_restores_context(live):
    sim, task, proc = live
    pc_before, sp_before = task.user_pc, task.sp
    k = sim.kernel
    k.do_syscall(task, "brk", [0])
    assert (task.user_pc, task.sp) == (pc_before, sp_before)


def test_move_umem_outside_cap_denied(live):
    sim, task, proc = live
    k = sim.kernel
    k.park_current()
    res = sim.guardian.g_move_umem("to_kernel", HEAP_VA, 0, 8, task.sp)
    assert res.status is Status.DENIED
    assert sim.ctx.counters["violations"] == 1


def test_move_umem_retry_on_swapped_page(live):
    sim, task, proc = live
    k = sim.kernel
    k.user_write(task, 0x0080_0000, b"swap.txt\0")
    k.swap_out(task, vpn_of(HEAP_VA))
    k.do_syscall(task, "open", [0x0080_0000])
    ret = k.do_syscall(task, "write", [3, HEAP_VA, 18])  # forces swap-in mid-copy
    assert ret == 18
    assert bytes(k.fs["swap.txt"]) == b"heap-page-contents"


# -- secure ABI accounting ---------------------------------------------------------


def test_free_vma_runs_without_crypto_and_zero_fills(live):
    sim, task, proc = live
    k = sim.kernel
    ret = k.do_syscall(task, "mmap", [0, 8 * PAGE_SIZE, 3, 0, 0, 0])
    for i in range(8):
        k.user_write(task, ret + i * PAGE_SIZE, b"fill-%d" % i)
    frames = [task.pages[vpn_of(ret) + i] for i in range(8)]
    before = (sim.ctx.counters["seal_ops"], sim.ctx.counters["open_ops"], sim.ctx.counters["digest_ops"])
    assert k.do_syscall(task, "munmap", [ret, 8 * PAGE_SIZE]) == 0
    after = (sim.ctx.counters["seal_ops"], sim.ctx.counters["open_ops"], sim.ctx.counters["digest_ops"])
    assert before == after  # zero seal/open/digest on the free path
    for fno in frames:
        assert k.kread(fno * PAGE_SIZE, PAGE_SIZE) == bytes(PAGE_SIZE)


def test_touch_after_free_is_fatal(live):
    sim, task, proc = live
    k = sim.kernel
    ret = k.do_syscall(task, "mmap", [0, PAGE_SIZE, 3, 0, 0, 0])
    k.user_write(task, ret, b"x")
    k.do_syscall(task, "munmap", [ret, PAGE_SIZE])
    assert k.user_write(task, ret, b"y") is None or not task.alive
    assert not task.alive


def test_migration_accounting_and_bytes(live):
    sim, task, proc = live
    k = sim.kernel
    vpn = vpn_of(HEAP_VA)
    snapshot = k.user_read(task, HEAP_VA, PAGE_SIZE)
    before = dict(sim.ctx.counters)
    assert k.migrate_page(task, vpn)
    assert sim.ctx.counters["seal_ops"] == before["seal_ops"]
    assert sim.ctx.counters["open_ops"] == before["open_ops"]
    assert sim.ctx.counters["digest_ops"] == before["digest_ops"] + 1
    assert k.user_read(task, HEAP_VA, PAGE_SIZE) == snapshot


def test_copy_page_to_foreign_process_rejected(live):
    sim, task, proc = live
    k = sim.kernel
    other = sim.spawn("t2", "demo", True)
    k.do_syscall(other, "brk", [HEAP_VA + PAGE_SIZE])
    k.user_write(other, HEAP_VA, b"other")
    src = sim.task("t1").pages[vpn_of(HEAP_VA)]
    dst = k.alloc_frame()
    from blindfold_sim.simhw import Access

    res = sim.guardian.g_copy_page(src, dst)
    while res.status is Status.RETRY:  # materialize the signature page
        assert k.handle_page_fault(task, res.fault_va, Access.WRITE)
        res = sim.guardian.g_copy_page(src, dst)
    assert res.ok
    # the copy belongs to t1; t2's table may not claim it
    res = k.set_pte(other, other.user_root, vpn_of(HEAP_VA) + 2, Pte(True, True, True, dst))
    assert res.status is Status.REJECTED


def test_copy_page_to_mapped_destination_rejected(live):
    sim, task, proc = live
    src = task.pages[vpn_of(HEAP_VA)]
    dst = task.pages[vpn_of(0x0040_0000)]  # text page, still mapped
    res = sim.guardian.g_copy_page(src, dst)
    assert res.status is Status.REJECTED


# -- signals ----------------------------------------------------------------------


def test_signal_registered_handler_runs_and_resumes(live):
    sim, task, proc = live
    k = sim.kernel
    k.user_write(task, 0x0080_0100, (0x0040_1000).to_bytes(4, "little") + bytes(12))
    k.do_syscall(task, "sigaction", [10, 0x0080_0100, 0])
    assert 0x0040_1000 in proc.signal_handlers
    pc_before = task.user_pc
    assert k.deliver_signal(task, 10)
    assert task.user_pc == pc_before  # main context restored after the handler
    assert ("signal", 10, 0x0040_1000) in task.outputs


def test_signal_unregistered_handler_rejected(live):
    sim, task, proc = live
    k = sim.kernel
    k.user_write(task, 0x0080_0100, (0x0040_1000).to_bytes(4, "little") + bytes(12))
    k.do_syscall(task, "sigaction", [10, 0x0080_0100, 0])
    assert not k.deliver_signal(task, 10, spoof_pc=0x0044_0000)
    assert sim.ctx.counters["violations"] == 1


# -- DMA ---------------------------------------------------------------------------


def test_dma_shared_allowed_private_rejected(live):
    sim, task, proc = live
    k = sim.kernel
    shared_va = k.do_syscall(task, "mmap", [0, PAGE_SIZE, 3, 1, 0, 0])
    k.user_write(task, shared_va, b"shared-buffer")
    assert k.dma_map(task, 0x2000, shared_va).ok
    assert k.dma_read("dev0", 0x2000, 13) == b"shared-buffer"
    res = k.dma_map(task, 0x3000, HEAP_VA)
    assert res.status is Status.REJECTED


def test_dma_rejects_ciphertext_frames(live):
    sim, task, proc = live
    k = sim.kernel
    vpn = vpn_of(HEAP_VA)
    frame = task.pages[vpn]
    k.swap_out(task, vpn)
    res = sim.guardian.dma_map_check(0x4000, HEAP_VA, frame, task.user_root)
    assert res.status is Status.REJECTED


def test_dma_mapping_invalidated_when_vma_freed(live):
    sim, task, proc = live
    k = sim.kernel
    shared_va = k.do_syscall(task, "mmap", [0, PAGE_SIZE, 3, 1, 0, 0])
    k.user_write(task, shared_va, b"dma")
    assert k.dma_map(task, 0x2000, shared_va).ok
    k.do_syscall(task, "munmap", [shared_va, PAGE_SIZE])
    assert k.dma_read("dev0", 0x2000, 8) is None


# -- integrity of the monitor's own trail -------------------------------------------


def test_every_table_edit_is_journaled(live):
    sim, task, proc = live
    k = sim.kernel

    def table_snapshot():
        snap = {}
        for frame in sim.guardian.table_meta:
            snap[frame] = sim.machine.phys.read_frame(frame)
        return snap

    before = table_snapshot()
    mark = len(sim.guardian.pt_journal)
    k.swap_out(task, vpn_of(HEAP_VA))
    k.swap_in(task, vpn_of(HEAP_VA))
    k.migrate_page(task, vpn_of(HEAP_VA))
    after = table_snapshot()
    edits = sim.guardian.pt_journal[mark:]
    replay = {f: bytearray(b) for f, b in before.items()}
    for _, frame, index, old, new in edits:
        if frame not in replay:  # table locked mid-trace
            replay[frame] = bytearray(sim.machine.phys.read_frame(frame))
            continue
        assert int.from_bytes(replay[frame][index * 4 : index * 4 + 4], "little") == old
        replay[frame][index * 4 : index * 4 + 4] = new.to_bytes(4, "little")
    for frame, data in after.items():
        if frame in before:
            assert bytes(replay[frame]) == data, f"unattributed edit in table frame {frame}"


def test_sweep_flags_corrupted_bookkeeping(live):
    sim, task, proc = live
    assert sweep_confidentiality(sim) == []
    frame = task.pages[vpn_of(HEAP_VA)]
    sim.guardian.frame_info[frame].refcount += 1  # test-only corruption
    assert sweep_confidentiality(sim)
    sim.guardian.frame_info[frame].refcount -= 1
