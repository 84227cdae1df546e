"""Simulated machine: physical memory, two-level MMU with an ASID-tagged
TLB, virtual-memory control registers that trap kernel updates to a
higher privilege level, and interrupt-table dispatch.

There is no instruction decoding.  "Execution" is scripted by the harness;
a control transfer into a trampoline page is modelled as a direct call into
the Guardian, and a transfer into the kernel half as a call into the
kernel's registered event handler.
"""

from dataclasses import dataclass, field
import enum
import struct

from .layout import (
    KERNEL_BASE,
    L1_ENTRIES,
    L2_ENTRIES,
    PAGE_SHIFT,
    PAGE_SIZE,
)
from .runtime import SimContext

WORD = 4
_ZERO_FRAME = bytes(PAGE_SIZE)


class Mode(enum.Enum):
    USER = "user"
    KERNEL = "kernel"
    GUARDIAN = "guardian"


class Access(enum.Enum):
    READ = "r"
    WRITE = "w"
    EXEC = "x"


class FaultKind(enum.Enum):
    NOT_PRESENT = "not_present"
    PERMISSION = "permission"


class Fault(Exception):
    def __init__(self, kind: FaultKind, va: int, access: Access, mode: Mode):
        super().__init__(f"{kind.value} at {va:#010x} ({access.value}, {mode.value})")
        self.kind = kind
        self.va = va
        self.access = access
        self.mode = mode


class Cause(enum.IntEnum):
    SYSCALL = 0
    PAGE_FAULT = 1
    TIMER = 2
    DEVICE = 3


@dataclass
class TrapFrame:
    """Execution context at a trap.  For syscalls the identifier and
    arguments are snapshotted from the gprs at trap time; they stay
    legible to the kernel (they are the request) even after the Guardian
    clears the register file."""

    gprs: list[int] = field(default_factory=lambda: [0] * 8)
    pc: int = 0
    sp: int = 0
    cause: Cause = Cause.TIMER
    fault_va: int = 0
    fault_access: Access = Access.READ
    syscall_id: int = 0
    syscall_args: tuple = ()

    def copy(self) -> "TrapFrame":
        return TrapFrame(
            gprs=list(self.gprs),
            pc=self.pc,
            sp=self.sp,
            cause=self.cause,
            fault_va=self.fault_va,
            fault_access=self.fault_access,
            syscall_id=self.syscall_id,
            syscall_args=self.syscall_args,
        )


@dataclass(frozen=True)
class Pte:
    present: bool
    writable: bool = False
    user_accessible: bool = False
    frame_no: int = 0

    def encode(self) -> int:
        if not self.present:
            return 0
        return (
            1
            | (2 if self.writable else 0)
            | (4 if self.user_accessible else 0)
            | (self.frame_no << PAGE_SHIFT)
        )

    @staticmethod
    def decode(word: int) -> "Pte":
        return Pte(
            present=bool(word & 1),
            writable=bool(word & 2),
            user_accessible=bool(word & 4),
            frame_no=word >> PAGE_SHIFT,
        )


PTE_ABSENT = Pte(present=False)


class PhysMem:
    """Frame-granular physical memory; frames materialize on first write."""

    def __init__(self, frame_count: int):
        self.frame_count = frame_count
        self.frame_size = PAGE_SIZE
        self.frames: list[bytearray | None] = [None] * frame_count

    def _frame(self, fno: int) -> bytearray:
        if not 0 <= fno < self.frame_count:
            raise IndexError(f"frame {fno} out of range")
        f = self.frames[fno]
        if f is None:
            f = bytearray(PAGE_SIZE)
            self.frames[fno] = f
        return f

    def read_frame(self, fno: int) -> bytes:
        if not 0 <= fno < self.frame_count:
            raise IndexError(f"frame {fno} out of range")
        f = self.frames[fno]
        return _ZERO_FRAME if f is None else bytes(f)

    def write_frame(self, fno: int, data: bytes):
        if len(data) != PAGE_SIZE:
            raise ValueError("frame writes are whole pages")
        self._frame(fno)[:] = data

    def zero_frame(self, fno: int):
        self.frames[fno] = None

    def read(self, pa: int, n: int) -> bytes:
        fno, off = divmod(pa, PAGE_SIZE)
        if off + n > PAGE_SIZE:
            raise ValueError("physical access straddles a frame")
        f = self.frames[fno] if 0 <= fno < self.frame_count else None
        if f is None and not 0 <= fno < self.frame_count:
            raise IndexError(f"frame {fno} out of range")
        return bytes(_ZERO_FRAME[off : off + n]) if f is None else bytes(f[off : off + n])

    def write(self, pa: int, data: bytes):
        fno, off = divmod(pa, PAGE_SIZE)
        if off + len(data) > PAGE_SIZE:
            raise ValueError("physical access straddles a frame")
        self._frame(fno)[off : off + len(data)] = data

    def read_word(self, pa: int) -> int:
        return struct.unpack("<I", self.read(pa, WORD))[0]

    def write_word(self, pa: int, value: int):
        self.write(pa, struct.pack("<I", value & 0xFFFFFFFF))

    def read_table(self, fno: int) -> tuple:
        """All 1024 words of a table frame, decoded in one call."""
        return struct.unpack("<1024I", self.read_frame(fno))


@dataclass
class VmControl:
    vm_enabled: bool = False
    ptbr_user: int = 0
    ptbr_kernel: int = 0
    itbr: int = 0
    asid: int = 0


class VmcField(enum.Enum):
    VM_ENABLE = "vm_enable"
    PTBR_USER = "ptbr_user"
    PTBR_KERNEL = "ptbr_kernel"
    ITBR = "itbr"
    ASID = "asid"


@dataclass(frozen=True)
class TlbEntry:
    asid: int
    vpn: int
    pte: Pte


class Tlb:
    """Fully associative, FIFO eviction, exact (asid, vpn) match."""

    def __init__(self, entries: int):
        self.capacity = entries
        self.map: dict[tuple[int, int], Pte] = {}
        self.order: list[tuple[int, int]] = []

    def lookup(self, asid: int, vpn: int):
        return self.map.get((asid, vpn))

    def fill(self, asid: int, vpn: int, pte: Pte):
        key = (asid, vpn)
        if key not in self.map and len(self.order) >= self.capacity:
            victim = self.order.pop(0)
            del self.map[victim]
        if key not in self.map:
            self.order.append(key)
        self.map[key] = pte

    def flush_all(self):
        self.map.clear()
        self.order.clear()

    def flush_asid(self, asid: int):
        dead = [k for k in self.order if k[0] == asid]
        for k in dead:
            del self.map[k]
        self.order = [k for k in self.order if k[0] != asid]

    def invalidate_vpn(self, vpn: int):
        dead = [k for k in self.order if k[1] == vpn]
        for k in dead:
            del self.map[k]
        self.order = [k for k in self.order if k[1] != vpn]

    def invalidate_frame(self, frame_no: int):
        dead = [k for k, pte in self.map.items() if pte.frame_no == frame_no]
        for k in dead:
            del self.map[k]
        deadset = set(dead)
        self.order = [k for k in self.order if k not in deadset]

    def entries(self) -> list[TlbEntry]:
        return [TlbEntry(a, v, self.map[(a, v)]) for (a, v) in self.order]


# Interrupt-table layout: one 8-byte descriptor per cause at the start of
# the table frame: u32 handler_pc, u32 guardian_first.
IT_ENTRY_SIZE = 8


def write_interrupt_table(phys: PhysMem, frame: int, entries: dict):
    for cause, (handler_pc, guardian_first) in entries.items():
        off = int(cause) * IT_ENTRY_SIZE
        phys.write(frame * PAGE_SIZE + off, struct.pack("<II", handler_pc, 1 if guardian_first else 0))


def read_interrupt_entry(phys: PhysMem, frame: int, cause: Cause) -> tuple[int, bool]:
    off = int(cause) * IT_ENTRY_SIZE
    pc, gfirst = struct.unpack("<II", phys.read(frame * PAGE_SIZE + off, IT_ENTRY_SIZE))
    return pc, bool(gfirst)


class Machine:
    """The simulated hardware.  Trusted software (the Guardian) registers
    hooks for VM-control traps, guardian-first interrupts and trampoline
    entries; the kernel registers its event handler."""

    def __init__(self, ctx: SimContext):
        self.ctx = ctx
        self.phys = PhysMem(ctx.config.frame_count)
        self.vmc = VmControl()
        self.tlb = Tlb(ctx.config.tlb_entries)
        self.booted = False
        self.walk_count = 0
        self.vmc_trap_handler = None     # guardian.g_vmc_trap
        self.interrupt_hook = None       # guardian.g_interrupt
        self.kernel_handler = None       # kernel.handle_event(handler_pc, tf)
        self.trampoline_hook = None      # guardian hook for user->guardian entry
        self.locked_write_probe = None   # classifier for permission-fault logging
        self.hidden_read_probe = None    # classifier for hidden-frame read faults
        self.user_has_control = False    # true between a resume/create and the next trap

    # -- translation ------------------------------------------------------

    def root_for(self, va: int) -> int:
        return self.vmc.ptbr_user if va < KERNEL_BASE else self.vmc.ptbr_kernel

    def walk(self, root_frame: int, va: int):
        """Raw two-level walk; returns the leaf Pte or None."""
        self.walk_count += 1
        l1_idx = (va >> 22) & (L1_ENTRIES - 1)
        l1_word = self.phys.read_word(root_frame * PAGE_SIZE + WORD * l1_idx)
        if not l1_word & 1:
            return None
        l2_frame = l1_word >> PAGE_SHIFT
        l2_idx = (va >> PAGE_SHIFT) & (L2_ENTRIES - 1)
        word = self.phys.read_word(l2_frame * PAGE_SIZE + WORD * l2_idx)
        pte = Pte.decode(word)
        return pte if pte.present else None

    def translate(self, va: int, access: Access, mode: Mode) -> int:
        if not self.vmc.vm_enabled:
            raise RuntimeError("translation with virtual memory disabled")
        vpn = va >> PAGE_SHIFT
        pte = self.tlb.lookup(self.vmc.asid, vpn)
        filled = False
        if pte is None:
            pte = self.walk(self.root_for(va), va)
            if pte is None:
                raise Fault(FaultKind.NOT_PRESENT, va, access, mode)
            filled = True
        if access is Access.WRITE and not pte.writable:
            raise Fault(FaultKind.PERMISSION, va, access, mode)
        if mode is Mode.USER and not pte.user_accessible:
            raise Fault(FaultKind.PERMISSION, va, access, mode)
        if filled:
            self.tlb.fill(self.vmc.asid, vpn, pte)
        return pte.frame_no * PAGE_SIZE + (va & (PAGE_SIZE - 1))

    def mem_read(self, va: int, n: int, mode: Mode) -> bytes:
        if (va & (PAGE_SIZE - 1)) + n > PAGE_SIZE:
            raise ValueError("accesses must not straddle pages; split the call")
        try:
            pa = self.translate(va, Access.READ, mode)
        except Fault:
            if (
                mode is Mode.KERNEL
                and self.hidden_read_probe is not None
                and self.hidden_read_probe(va)
            ):
                self.ctx.violation("machine", "sensitive_read_blocked", f"va={va:#010x}")
            raise
        return self.phys.read(pa, n)

    def mem_write(self, va: int, data: bytes, mode: Mode):
        if (va & (PAGE_SIZE - 1)) + len(data) > PAGE_SIZE:
            raise ValueError("accesses must not straddle pages; split the call")
        try:
            pa = self.translate(va, Access.WRITE, mode)
        except Fault as fault:
            if (
                fault.kind is FaultKind.PERMISSION
                and mode is Mode.KERNEL
                and self.locked_write_probe is not None
                and self.locked_write_probe(va)
            ):
                self.ctx.violation("machine", "locked_frame_write", f"va={va:#010x}")
            raise
        self.phys.write(pa, data)

    # -- vm control -------------------------------------------------------

    def set_vm_control(self, field: VmcField, value, mode: Mode):
        if mode is Mode.USER:
            raise PermissionError("user mode cannot touch VM control")
        if field is VmcField.VM_ENABLE and not value and self.booted:
            self.ctx.violation("machine", "vm_disable_attempt", f"mode={mode.value}")
            return "rejected"
        if mode is Mode.KERNEL:
            # Never applied directly; packaged and delivered to the Guardian.
            return self.vmc_trap_handler(field, value)
        if field is VmcField.VM_ENABLE:
            self.vmc.vm_enabled = bool(value)
            if value:
                self.booted = True
        elif field is VmcField.PTBR_USER:
            self.vmc.ptbr_user = value
        elif field is VmcField.PTBR_KERNEL:
            self.vmc.ptbr_kernel = value
        elif field is VmcField.ITBR:
            self.vmc.itbr = value
        elif field is VmcField.ASID:
            self.vmc.asid = value & 0xFF
        return "applied"

    # -- events -----------------------------------------------------------

    def deliver_event(self, tf: TrapFrame):
        """Dispatch a trap through the active interrupt table.  Returns
        whatever the kernel's handling produces (the resume frame)."""
        handler_pc, guardian_first = read_interrupt_entry(self.phys, self.vmc.itbr, tf.cause)
        self.ctx.trace_event("trap", tf.cause.name, guardian_first)
        if guardian_first and self.interrupt_hook is not None:
            self.interrupt_hook(tf)
        return self.kernel_handler(handler_pc, tf)

    def return_to_user(self, tf: TrapFrame):
        """The kernel hands control back to the address in tf.pc.  A pc
        inside a trampoline page re-enters the Guardian (trapped return);
        anything else resumes as-is."""
        if self.trampoline_hook is not None:
            handled = self.trampoline_hook(tf)
            if handled is not None:
                return handled
        self.ctx.trace_event("resume_direct", tf.pc)
        return tf

    def tlb_flush(self, asid: int | None = None):
        self.ctx.counters.bump("tlb_flushes")
        if asid is None:
            self.tlb.flush_all()
        else:
            self.tlb.flush_asid(asid)
