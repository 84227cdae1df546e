import pytest

from blindfold_sim.guardian import FrameState
from blindfold_sim.harness import Simulation
from blindfold_sim.layout import HEAP_VA, PAGE_SIZE, vpn_of
from blindfold_sim.oskernel import ENOSYS
from blindfold_sim.runtime import Config, GUARDIAN_ABI
from blindfold_sim.simhw import Mode, VmcField


@pytest.fixture
def sim():
    return Simulation(4, Config(frame_count=1024))


def _grown(sim, name="t1", sensitive=True):
    task = sim.spawn(name, "demo", sensitive)
    sim.kernel.do_syscall(task, "brk", [HEAP_VA + 4 * PAGE_SIZE])
    return task


def test_demand_zero_heap(sim):
    task = _grown(sim)
    assert sim.kernel.user_read(task, HEAP_VA, 64) == bytes(64)


def test_file_read_write_roundtrip(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, 0x0080_0000, b"data.bin\0")
    k.user_write(task, HEAP_VA, b"payload-123")
    fd = k.do_syscall(task, "open", [0x0080_0000])
    assert fd == 3
    assert k.do_syscall(task, "write", [fd, HEAP_VA, 11]) == 11
    assert bytes(k.fs["data.bin"]) == b"payload-123"  # byte-compare vs backing file
    k.do_syscall(task, "close", [fd])
    fd = k.do_syscall(task, "open", [0x0080_0000])
    assert k.do_syscall(task, "read", [fd, HEAP_VA + PAGE_SIZE, 11]) == 11
    assert k.user_read(task, HEAP_VA + PAGE_SIZE, 11) == b"payload-123"


def test_brk_registers_guardian_vma(sim):
    task = _grown(sim)
    proc = sim.guardian.by_user_root[task.user_root]
    heap = next(v for v in proc.vmas if v.start == HEAP_VA)
    assert heap.end == HEAP_VA + 4 * PAGE_SIZE


def test_swap_out_slot_is_ciphertext_for_sensitive(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"will-be-sealed")
    snapshot = k.user_read(task, HEAP_VA, PAGE_SIZE)
    k.swap_out(task, vpn_of(HEAP_VA))
    slot = k.swap[task.swapped[vpn_of(HEAP_VA)]]
    assert slot.data != snapshot
    from blindfold_sim import crypto

    assert crypto.digest(slot.data) != crypto.digest(snapshot)


def test_swap_non_sensitive_is_plaintext_zero_crypto(sim):
    task = _grown(sim, "p1", sensitive=False)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"plain-swap")
    before = (sim.ctx.counters["seal_ops"], sim.ctx.counters["open_ops"])
    k.swap_out(task, vpn_of(HEAP_VA))
    slot = k.swap[task.swapped[vpn_of(HEAP_VA)]]
    assert slot.data[:10] == b"plain-swap"
    assert k.swap_in(task, vpn_of(HEAP_VA))
    assert (sim.ctx.counters["seal_ops"], sim.ctx.counters["open_ops"]) == before


def test_swap_roundtrip_preserves_contents(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"snapshot-me")
    snap = k.user_read(task, HEAP_VA, PAGE_SIZE)
    k.swap_out(task, vpn_of(HEAP_VA))
    assert k.swap_in(task, vpn_of(HEAP_VA))
    assert k.user_read(task, HEAP_VA, PAGE_SIZE) == snap


def test_compression_of_sealed_pages_is_ineffective(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"A" * 2048)  # highly compressible plaintext
    k.swap_out(task, vpn_of(HEAP_VA), compress=True)
    assert k.swap_in(task, vpn_of(HEAP_VA))
    assert k.user_read(task, HEAP_VA, 16) == b"A" * 16
    # ciphertext does not compress: ratio stays around 1000 per-mille
    assert k.compress_ratios[-1] >= 990


def test_compression_of_plain_pages_works(sim):
    task = _grown(sim, "p1", sensitive=False)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"A" * 2048)
    k.swap_out(task, vpn_of(HEAP_VA), compress=True)
    assert k.compress_ratios[-1] < 100
    assert k.swap_in(task, vpn_of(HEAP_VA))


def test_copy_user_chunking_one_guardian_call_per_page(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"x" * PAGE_SIZE)
    k.user_write(task, HEAP_VA + PAGE_SIZE, b"y" * 16)
    k.user_write(task, 0x0080_0000, b"two.bin\0")
    before = sim.ctx.counters["g_move_umem"]
    fd = k.do_syscall(task, "open", [0x0080_0000])
    k.do_syscall(task, "write", [fd, HEAP_VA + PAGE_SIZE - 8, 16])  # spans 2 pages
    spent = sim.ctx.counters["g_move_umem"] - before
    assert spent == 2 + 1  # two data chunks + one path copy at open


def test_copy_user_non_sensitive_no_guardian_calls(sim):
    task = _grown(sim, "p1", sensitive=False)
    k = sim.kernel
    k.user_write(task, 0x0080_0000, b"f\0")
    k.user_write(task, HEAP_VA, b"z" * 64)
    before = sim.ctx.counters["g_move_umem"]
    fd = k.do_syscall(task, "open", [0x0080_0000])
    k.do_syscall(task, "write", [fd, HEAP_VA, 64])
    assert sim.ctx.counters["g_move_umem"] == before


def test_retry_on_swapped_page_second_call_succeeds(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"c" * 64)
    k.user_write(task, 0x0080_0000, b"r.bin\0")
    k.swap_out(task, vpn_of(HEAP_VA))
    calls = {"n": 0}
    orig = sim.guardian.g_move_umem

    def counted(*a, **kw):
        calls["n"] += 1
        return orig(*a, **kw)

    sim.guardian.g_move_umem = counted
    fd = k.do_syscall(task, "open", [0x0080_0000])
    calls["n"] = 0
    assert k.do_syscall(task, "write", [fd, HEAP_VA, 64]) == 64
    sim.guardian.g_move_umem = orig
    assert calls["n"] == 2  # Retry once, then the reissued call succeeds


def test_retry_loop_bounded_per_chunk(sim):
    # Faults resolve at most once per page-bounded chunk, so a copy over N
    # swapped pages costs at most 2N calls and each chunk at most 2.
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"c" * (2 * PAGE_SIZE))
    k.user_write(task, 0x0080_0000, b"r.bin\0")
    k.swap_out(task, vpn_of(HEAP_VA))
    k.swap_out(task, vpn_of(HEAP_VA) + 1)
    trace = []
    orig = sim.guardian.g_move_umem

    def counted(direction, uaddr, kaddr, nbytes, sp):
        trace.append(uaddr)
        return orig(direction, uaddr, kaddr, nbytes, sp)

    sim.guardian.g_move_umem = counted
    fd = k.do_syscall(task, "open", [0x0080_0000])
    trace.clear()
    assert k.do_syscall(task, "write", [fd, HEAP_VA, 2 * PAGE_SIZE]) == 2 * PAGE_SIZE
    sim.guardian.g_move_umem = orig
    assert len(trace) <= 4
    for uaddr in set(trace):
        assert trace.count(uaddr) <= 2  # per-chunk loop: pages-in-chunk + 1


def test_migrate_all_preserves_memory_image(sim):
    task = _grown(sim)
    k = sim.kernel
    for i in range(4):
        k.user_write(task, HEAP_VA + i * PAGE_SIZE, b"page-%d" % i)
    snaps = {i: k.user_read(task, HEAP_VA + i * PAGE_SIZE, 32) for i in range(4)}
    moved = k.do_syscall(task, "migrate_pages", [])
    assert moved >= 4
    for i in range(4):
        assert k.user_read(task, HEAP_VA + i * PAGE_SIZE, 32) == snaps[i]


def test_migrate_non_sensitive_bypasses_guardian_copy(sim):
    task = _grown(sim, "p1", sensitive=False)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"moveme")
    before = sim.ctx.counters["g_copy_page"]
    assert k.migrate_page(task, vpn_of(HEAP_VA))
    assert sim.ctx.counters["g_copy_page"] == before
    assert k.user_read(task, HEAP_VA, 6) == b"moveme"


def test_fork_cow_divergence_isolated_both_modes(sim):
    for name, sensitive in (("s", True), ("p", False)):
        parent = _grown(sim, name + "1", sensitive)
        k = sim.kernel
        k.user_write(parent, HEAP_VA, b"original-content")
        child_tid = k.do_syscall(parent, "fork", [])
        child = k.tasks[child_tid]
        assert child.sensitive == sensitive  # child is sensitive iff parent is
        k.user_write(parent, HEAP_VA, b"parent-mutation!")
        k.ensure_user(child)
        assert k.user_read(child, HEAP_VA, 16) == b"original-content"
        k.user_write(child, HEAP_VA + 16, b"child-write")
        k.ensure_user(parent)
        assert k.user_read(parent, HEAP_VA, 16) == b"parent-mutation!"
        assert k.user_read(parent, HEAP_VA + 16, 11) == bytes(11)


def test_fork_returns_differ_parent_child(sim):
    parent = _grown(sim)
    k = sim.kernel
    child_tid = k.do_syscall(parent, "fork", [])
    assert child_tid == k.tasks[child_tid].tid
    child = k.tasks[child_tid]
    k.ensure_user(child)
    # the child resumed through the trampoline with the duplicated context
    assert child.ktf.gprs[0] == 0
    assert child.in_user


def test_plain_fork_uses_only_table_plumbing(sim):
    parent = _grown(sim, "p1", sensitive=False)
    k = sim.kernel
    k.user_write(parent, HEAP_VA, b"cowcow")
    before = {n: sim.ctx.counters[n] for n in GUARDIAN_ABI}
    k.do_syscall(parent, "fork", [])
    for name in GUARDIAN_ABI:
        if name in ("g_set_pt", "g_vmc_trap"):
            continue
        assert sim.ctx.counters[name] == before[name], name


def test_clone_thread_context_restored_and_ctid_consumed(sim):
    task = _grown(sim)
    k = sim.kernel
    proc = sim.guardian.by_user_root[task.user_root]
    ctid_va = HEAP_VA + 0x100
    k.user_write(task, ctid_va, b"\xff" * 8)
    new_sp = task.sp - 0x800
    ret = k.do_syscall(task, "clone", [0, new_sp, 0, ctid_va])
    assert ret >= 0x1000
    assert new_sp in proc.saved_ctx  # restorable twice: recognized by new sp
    assert len(proc.caps._long) == 1
    k.resume_thread(task, new_sp)
    assert task.sp == new_sp
    k.ensure_user(task)
    k.do_syscall(task, "exit", [0])
    assert not task.alive
    assert k.user_read  # task dead; verify via guardian view instead
    assert len(proc.caps._long) == 0  # disposable grant consumed at thread exit


def test_exit_frees_everything_without_crypto(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, b"gone")
    frames = dict(task.pages)
    before = (sim.ctx.counters["seal_ops"], sim.ctx.counters["digest_ops"])
    k.do_syscall(task, "exit", [0])
    assert not task.alive
    assert (sim.ctx.counters["seal_ops"], sim.ctx.counters["digest_ops"]) == before
    for vpn, fno in frames.items():
        state = sim.guardian.frame_info[fno].state
        assert state in (FrameState.NORMAL, FrameState.FREE), (hex(vpn), state)


def test_unsupported_syscalls_return_enosys(sim):
    task = _grown(sim)
    for name in ("process_vm_readv", "process_vm_writev", "shmat", "ioctl", "io_uring_setup", "vmsplice"):
        assert sim.kernel.do_syscall(task, name, []) == ENOSYS


def test_futex_wait_is_single_guardian_call(sim):
    task = _grown(sim)
    k = sim.kernel
    k.user_write(task, HEAP_VA, (7).to_bytes(4, "little"))
    before = sim.ctx.counters["g_move_umem"]
    assert k.do_syscall(task, "futex", [HEAP_VA, 0, 7]) == 0  # matched: queued
    assert sim.ctx.counters["g_move_umem"] == before + 1
    task.blocked = False
    assert k.do_syscall(task, "futex", [HEAP_VA, 0, 9]) == 0xFFFFFFF5  # EAGAIN
    assert k.do_syscall(task, "futex", [HEAP_VA, 1, 0]) == 1  # wake


def test_round_robin_is_starvation_free(sim):
    tasks = [_grown(sim, f"p{i}", sensitive=False) for i in range(3)]
    seen = set()
    for _ in range(6):
        sim.kernel.tick()
        seen.add(sim.kernel.current.tid)
    assert seen == {t.tid for t in tasks}


def test_context_switch_between_plain_tasks_single_trap(sim):
    a = _grown(sim, "a", sensitive=False)
    b = _grown(sim, "b", sensitive=False)
    sim.kernel.ensure_user(a)
    before = dict(sim.ctx.counters)
    sim.kernel.ensure_user(b)
    delta = {k: sim.ctx.counters[k] - before.get(k, 0) for k in sim.ctx.counters}
    assert delta["g_vmc_trap"] == 2  # ptbr + asid proposal
    assert all(v == 0 for k, v in delta.items() if k.startswith("g_") and k != "g_vmc_trap")


def test_sensitive_table_active_only_after_resume(sim):
    task = _grown(sim)
    other = _grown(sim, "p1", sensitive=False)
    k = sim.kernel
    k.ensure_user(other)
    proc = sim.guardian.by_user_root[task.user_root]
    k.park_current()
    sim.machine.set_vm_control(VmcField.PTBR_USER, task.user_root, Mode.KERNEL)
    assert sim.machine.vmc.ptbr_user == proc.cloak_ptbr  # cloak until g_proc_resume
    k.ensure_user(task)
    assert sim.machine.vmc.ptbr_user == task.user_root


def test_exec_rejects_unadapted_sensitive_image(sim):
    from blindfold_sim import binadapt

    raw = binadapt.build_demo_image("demo")
    task = sim.kernel.exec_create_process(raw, True, "bad", dev_pub=sim.dev_key.public())
    assert task is None
    assert sim.ctx.counters["violations"] >= 1


def test_exec_plain_legacy_image_zero_process_calls(sim):
    task = _grown(sim, "legacy", sensitive=False)
    assert sim.ctx.counters["g_proc_create"] == 0
    assert sim.ctx.counters["g_interrupt"] == 0
    assert sim.kernel.user_read(task, 0x0040_0000, 9) == b"text:demo"
