import pytest

from blindfold_sim.guardian import Guardian
from blindfold_sim import crypto
from blindfold_sim.layout import KERNEL_BASE, PAGE_SIZE, direct_map_va
from blindfold_sim.runtime import Config, SimContext
from blindfold_sim.simhw import (
    Access,
    Cause,
    Fault,
    FaultKind,
    Machine,
    Mode,
    Pte,
    TrapFrame,
    VmcField,
    read_interrupt_entry,
)


@pytest.fixture
def booted():
    """A machine with the Guardian's trusted initialization applied."""
    ctx = SimContext(0, Config(frame_count=512))
    m = Machine(ctx)
    g = Guardian(m, ctx, crypto.gen_keypair(ctx.crypto_rng))
    first_free = g.secure_boot()
    return ctx, m, g, first_free


def test_direct_map_identity(booted):
    ctx, m, g, _ = booted
    # Direct-map law: kernel VA = KERNEL_BASE + pa.
    assert m.translate(KERNEL_BASE + 0x2000, Access.READ, Mode.KERNEL) == 0x2000


def test_user_va_not_present_faults(booted):
    ctx, m, g, _ = booted
    with pytest.raises(Fault) as exc:
        m.translate(0x0040_0000, Access.READ, Mode.USER)
    assert exc.value.kind is FaultKind.NOT_PRESENT


def test_kernel_write_to_table_frame_permission_faults(booted):
    ctx, m, g, _ = booted
    with pytest.raises(Fault) as exc:
        m.mem_write(direct_map_va(g.kernel_root * PAGE_SIZE), b"\xff" * 4, Mode.KERNEL)
    assert exc.value.kind is FaultKind.PERMISSION
    assert ctx.counters["violations"] == 1


def test_kernel_write_to_interrupt_table_faults(booted):
    ctx, m, g, _ = booted
    with pytest.raises(Fault):
        m.mem_write(direct_map_va(g.normal_itbr * PAGE_SIZE), b"\x00" * 4, Mode.KERNEL)
    assert ctx.counters["violations"] == 1


def test_store_load_roundtrip(booted):
    ctx, m, g, first_free = booted
    va = direct_map_va(first_free * PAGE_SIZE)
    m.mem_write(va + 8, b"roundtrip", Mode.KERNEL)
    assert m.mem_read(va + 8, 9, Mode.KERNEL) == b"roundtrip"


def test_straddling_access_rejected(booted):
    ctx, m, g, first_free = booted
    with pytest.raises(ValueError):
        m.mem_read(direct_map_va(first_free * PAGE_SIZE) + PAGE_SIZE - 2, 4, Mode.KERNEL)


def test_vm_disable_rejected_after_boot(booted):
    ctx, m, g, _ = booted
    assert m.set_vm_control(VmcField.VM_ENABLE, False, Mode.KERNEL) == "rejected"
    assert m.vmc.vm_enabled
    assert ctx.counters["violations"] == 1
    # Guardian mode cannot clear it either once booted.
    assert m.set_vm_control(VmcField.VM_ENABLE, False, Mode.GUARDIAN) == "rejected"
    assert m.vmc.vm_enabled


def test_kernel_vmc_updates_trap_to_guardian(booted):
    ctx, m, g, _ = booted
    seen = []
    m.vmc_trap_handler = lambda fld, value: seen.append((fld, value)) or "trapped"
    assert m.set_vm_control(VmcField.PTBR_USER, 42, Mode.KERNEL) == "trapped"
    assert seen == [(VmcField.PTBR_USER, 42)]
    # Guardian mode applies directly.
    m.set_vm_control(VmcField.ITBR, g.secure_itbr, Mode.GUARDIAN)
    assert m.vmc.itbr == g.secure_itbr


def test_interrupt_tables_wrap_same_handlers(booted):
    ctx, m, g, _ = booted
    for cause in Cause:
        pc_n, gfirst_n = read_interrupt_entry(m.phys, g.normal_itbr, cause)
        pc_s, gfirst_s = read_interrupt_entry(m.phys, g.secure_itbr, cause)
        assert pc_n == pc_s  # the wrapper only adds the Guardian call
        assert not gfirst_n and gfirst_s


def test_deliver_event_guardian_first_ordering(booted):
    ctx, m, g, _ = booted
    order = []
    m.interrupt_hook = lambda tf: order.append("guardian")
    m.kernel_handler = lambda pc, tf: order.append(("kernel", pc))
    m.set_vm_control(VmcField.ITBR, g.secure_itbr, Mode.GUARDIAN)
    m.deliver_event(TrapFrame(cause=Cause.TIMER))
    assert order[0] == "guardian"
    m.set_vm_control(VmcField.ITBR, g.normal_itbr, Mode.GUARDIAN)
    order.clear()
    m.deliver_event(TrapFrame(cause=Cause.TIMER))
    assert order == [("kernel", read_interrupt_entry(m.phys, g.normal_itbr, Cause.TIMER)[0])]


def test_tlb_flush_forces_rewalk(booted):
    ctx, m, g, _ = booted
    va = KERNEL_BASE + 0x5000
    m.translate(va, Access.READ, Mode.KERNEL)
    walks = m.walk_count
    m.translate(va, Access.READ, Mode.KERNEL)
    assert m.walk_count == walks  # TLB hit
    m.tlb_flush()
    m.translate(va, Access.READ, Mode.KERNEL)
    assert m.walk_count == walks + 1


def test_tlb_flush_by_asid_is_selective(booted):
    ctx, m, g, _ = booted
    m.set_vm_control(VmcField.ASID, 3, Mode.GUARDIAN)
    m.translate(KERNEL_BASE + 0x1000, Access.READ, Mode.KERNEL)
    m.set_vm_control(VmcField.ASID, 5, Mode.GUARDIAN)
    m.translate(KERNEL_BASE + 0x1000, Access.READ, Mode.KERNEL)
    m.tlb_flush(asid=3)
    assert all(e.asid != 3 for e in m.tlb.entries())
    assert any(e.asid == 5 for e in m.tlb.entries())


def test_tlb_fifo_eviction(booted):
    ctx, m, g, _ = booted
    cap = m.tlb.capacity
    for i in range(1, cap + 5):
        m.translate(KERNEL_BASE + i * PAGE_SIZE, Access.READ, Mode.KERNEL)
    assert len(m.tlb.entries()) == cap
    walks = m.walk_count
    m.translate(KERNEL_BASE + PAGE_SIZE, Access.READ, Mode.KERNEL)  # evicted: re-walk
    assert m.walk_count == walks + 1


def test_translate_depends_only_on_tables_and_vmc(booted):
    ctx, m, g, _ = booted
    pa1 = m.translate(KERNEL_BASE + 0x3000, Access.READ, Mode.KERNEL)
    m.tlb_flush()
    pa2 = m.translate(KERNEL_BASE + 0x3000, Access.READ, Mode.KERNEL)
    assert pa1 == pa2 == 0x3000
