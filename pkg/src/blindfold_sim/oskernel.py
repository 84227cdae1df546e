"""The deliberately untrusted toy kernel.

It schedules tasks, manages frames, VMAs and swap, serves the modeled
system calls, and performs all non-semantic memory management (demand
paging, swap, migration, copy-on-write fork) through Guardian-mediated
paths.  It touches memory only through the simulated MMU, so every
protection the Guardian installs applies to it.  Under attack scenarios
the harness drives it into misbehaving on purpose.
"""

from dataclasses import dataclass, field
import enum
import zlib

from . import capsys
from .binadapt import ProgramImage, SegKind, PROT_W
from .guardian import Guardian, Result, Status, VmaStatus
from .layout import (
    HEAP_VA,
    KERNEL_BASE,
    L2_ENTRIES,
    PAGE_SHIFT,
    PAGE_SIZE,
    SIG_LEVEL_BASES,
    SIG_LEVELS,
    SPAN_PAGES,
    STACK_BASE,
    STACK_TOP,
    direct_map_va,
    is_sig_vpn,
    page_base,
    sig_slot_va,
    vpn_of,
)
from .simhw import Access, Cause, Fault, Machine, Mode, Pte, TrapFrame, VmcField

MMAP_BASE = 0x00C0_0000
ENOSYS = 0xFFFFFFDA  # -38
EFAULT = 0xFFFFFFF2  # -14
EAGAIN = 0xFFFFFFF5  # -11
MAP_FAILED = 0xFFFFFFFF

UNSUPPORTED_SYSCALLS = {
    100: "process_vm_readv",
    101: "process_vm_writev",
    102: "shmat",
    103: "ioctl",
    104: "io_uring_setup",
    105: "vmsplice",
}


class VmaKind(enum.Enum):
    ANON = "anon"
    FILE = "file"
    STACK = "stack"
    SIG_REGION = "sig"
    TRAMPOLINE = "tramp"


@dataclass
class Vma:
    start: int
    end: int
    kind: VmaKind
    prot_w: bool
    shared: bool = False
    seg_vaddr: int = 0  # backing segment for FILE vmas


@dataclass
class SwapSlot:
    slot_id: int
    data: bytes
    owner: tuple          # (tid, vpn)
    sealed: bool
    compressed: bool = False


@dataclass
class Device:
    name: str
    buffer: bytearray = field(default_factory=bytearray)


@dataclass
class Task:
    tid: int
    name: str
    sensitive: bool
    image: ProgramImage
    user_root: int = 0
    cloak_root: int = 0
    asid: int = 0
    sp: int = STACK_TOP - 64
    user_pc: int = 0
    in_user: bool = False
    alive: bool = True
    blocked: bool = False
    ktf: TrapFrame | None = None
    vmas: list = field(default_factory=list)
    pages: dict = field(default_factory=dict)       # vpn -> frame (resident)
    swapped: dict = field(default_factory=dict)     # vpn -> slot_id
    claims: dict = field(default_factory=dict)      # vpn -> [frames] (fork/migration)
    cow_shared: set = field(default_factory=set)    # vpns COW-shared (non-sensitive)
    fds: dict = field(default_factory=dict)
    next_fd: int = 3
    handlers: dict = field(default_factory=dict)    # signum -> handler pc
    threads: dict = field(default_factory=dict)     # sp -> {"ctid": va}
    tid_clear_addr: int = 0
    robust_list: int = 0
    outputs: list = field(default_factory=list)

    def vma_at(self, va: int):
        for v in self.vmas:
            if v.start <= va < v.end:
                return v
        return None


class Kernel:
    def __init__(self, machine: Machine, guardian: Guardian, ctx, first_free_frame: int):
        self.machine = machine
        self.guardian = guardian
        self.ctx = ctx
        self.free_frames = list(
            range(guardian.guardian_frames.start - 1, first_free_frame - 1, -1)
        )
        self.tasks: dict[int, Task] = {}
        self.current: Task | None = None
        self.fs: dict[str, bytearray] = {}
        self.swap: dict[int, SwapSlot] = {}
        self.devices: dict[str, Device] = {}
        self.futex_waiters: dict[int, list] = {}
        self.compress_ratios: list[int] = []  # per-mille
        self._next_tid = 1
        self._next_slot = 1
        self._next_asid = 1
        self._work = []
        self.kbuf_frame = self.alloc_frame()

    # -- low-level helpers ----------------------------------------------------

    def alloc_frame(self) -> int:
        if not self.free_frames:
            raise RuntimeError("out of physical frames")
        return self.free_frames.pop()

    def free_frame(self, fno: int):
        self.free_frames.append(fno)

    def kread(self, pa: int, n: int) -> bytes:
        """Kernel read through the direct map; faults are logged, not fatal."""
        return self.machine.mem_read(direct_map_va(pa), n, Mode.KERNEL)

    def kwrite(self, pa: int, data: bytes):
        self.machine.mem_write(direct_map_va(pa), data, Mode.KERNEL)

    def kwrite_frame(self, fno: int, data: bytes):
        for off in range(0, len(data), PAGE_SIZE):
            self.kwrite(fno * PAGE_SIZE + off, data[off : off + PAGE_SIZE])

    def read_pte(self, root: int, vpn: int) -> Pte:
        l1 = self.kread(root * PAGE_SIZE + 4 * (vpn >> 10), 4)
        word = int.from_bytes(l1, "little")
        if not word & 1:
            return Pte(False)
        l2 = word >> PAGE_SHIFT
        leaf = self.kread(l2 * PAGE_SIZE + 4 * (vpn & (L2_ENTRIES - 1)), 4)
        return Pte.decode(int.from_bytes(leaf, "little"))

    def set_pte(self, task: Task, root: int, vpn: int, pte: Pte) -> Result:
        """All post-lockdown PTE updates funnel through the Guardian.  The
        Guardian may bounce us with Retry when one of its signature-slot
        accesses faults; resolve the fault and reissue."""
        for _ in range(8):
            l1_word = int.from_bytes(self.kread(root * PAGE_SIZE + 4 * (vpn >> 10), 4), "little")
            if not l1_word & 1:
                l2_new = self.alloc_frame()
                self.kwrite_frame(l2_new, bytes(PAGE_SIZE))
                res = self.guardian.g_set_pt(root, vpn >> 10, Pte(True, False, False, l2_new).encode())
                if not res.ok:
                    self.free_frame(l2_new)
                    return res
                l1_word = Pte(True, False, False, l2_new).encode()
            l2 = l1_word >> PAGE_SHIFT
            res = self.guardian.g_set_pt(l2, vpn & (L2_ENTRIES - 1), pte.encode())
            if res.status is Status.RETRY:
                if not self.handle_page_fault(task, res.fault_va, Access.WRITE):
                    return res
                continue
            return res
        return res

    # -- process construction ----------------------------------------------------

    def _build_vmas(self, task: Task):
        for seg in task.image.segments:
            kind = {
                SegKind.TEXT: VmaKind.FILE,
                SegKind.DATA: VmaKind.FILE,
                SegKind.BSS: VmaKind.ANON,
                SegKind.TRAMPOLINE: VmaKind.TRAMPOLINE,
                SegKind.SIGSEG: VmaKind.SIG_REGION,
            }[seg.kind]
            task.vmas.append(
                Vma(seg.vaddr, seg.vaddr + seg.pages * PAGE_SIZE, kind, bool(seg.prot & PROT_W), seg_vaddr=seg.vaddr)
            )
        task.vmas.append(Vma(STACK_BASE, STACK_TOP, VmaKind.STACK, True))
        task.vmas.append(Vma(HEAP_VA, HEAP_VA, VmaKind.ANON, True))

    def _raw_map(self, root: int, vpn: int, pte: Pte):
        """Pre-lockdown table construction via plain direct-map writes."""
        l1_pa = root * PAGE_SIZE + 4 * (vpn >> 10)
        word = int.from_bytes(self.kread(l1_pa, 4), "little")
        if not word & 1:
            l2 = self.alloc_frame()
            self.kwrite_frame(l2, bytes(PAGE_SIZE))
            word = Pte(True, False, False, l2).encode()
            self.kwrite(l1_pa, word.to_bytes(4, "little"))
        l2 = word >> PAGE_SHIFT
        self.kwrite(l2 * PAGE_SIZE + 4 * (vpn & (L2_ENTRIES - 1)), pte.encode().to_bytes(4, "little"))

    def exec_create_process(self, image: ProgramImage, sensitive: bool, name: str, dev_pub=None) -> Task | None:
        task = Task(tid=self._next_tid, name=name, sensitive=sensitive, image=image)
        self._next_tid += 1
        task.user_pc = image.entry_va
        self._build_vmas(task)
        task.user_root = self.alloc_frame()
        self.kwrite_frame(task.user_root, bytes(PAGE_SIZE))

        for seg in image.segments:
            base_vpn = vpn_of(seg.vaddr)
            if seg.kind in (SegKind.BSS, SegKind.SIGSEG):
                continue  # demand-mapped
            writable = bool(seg.prot & PROT_W)
            for i in range(seg.pages):
                fno = self.alloc_frame()
                if seg.sealed:
                    self.kwrite_frame(fno, seg.sealed[i].ciphertext)
                else:
                    self.kwrite_frame(fno, seg.plaintext_page(i))
                self._raw_map(task.user_root, base_vpn + i, Pte(True, writable, True, fno))
                task.pages[base_vpn + i] = fno

        if sensitive:
            task.cloak_root = self.alloc_frame()
            self.kwrite_frame(task.cloak_root, bytes(PAGE_SIZE))

        self.tasks[task.tid] = task
        self.park_current()
        self.context_switch(task)

        if not sensitive:
            task.in_user = True
            self.ctx.trace_event("exec_plain", task.tid)
            return task

        handle = {
            "image": image,
            "user_root": task.user_root,
            "cloak_root": task.cloak_root,
            "dev_pub": dev_pub,
        }
        res = self.guardian.g_proc_create(handle)
        if not res.ok:
            self.ctx.log("kernel", "exec_rejected", f"{name}: {res.reason}")
            task.alive = False
            self.current = None
            return None
        proc = res.value
        task.user_pc = proc.orig_entry
        task.in_user = True
        self.ctx.trace_event("exec_sensitive", task.tid)
        return task

    # -- scheduling and trap plumbing -------------------------------------------------

    def context_switch(self, task: Task):
        self.machine.set_vm_control(VmcField.PTBR_USER, task.user_root, Mode.KERNEL)
        if not task.sensitive:
            if not task.asid:
                task.asid = self._next_asid
                self._next_asid = (self._next_asid + 1) % 128 or 1
            self.machine.set_vm_control(VmcField.ASID, task.asid, Mode.KERNEL)
        self.current = task

    def trap(self, task: Task, cause: Cause, fault_va=0, access=Access.READ, syscall=None):
        """Deliver a trap for the running task through the active interrupt
        table.  Returns the frame the task eventually resumes with."""
        gprs = [0] * 8
        if syscall is not None:
            sid, args = syscall
            gprs[0] = sid
            for i, a in enumerate(args[:6]):
                gprs[i + 1] = a & 0xFFFFFFFF
        tf = TrapFrame(
            gprs=gprs,
            pc=task.user_pc,
            sp=task.sp,
            cause=cause,
            fault_va=fault_va,
            fault_access=access,
            syscall_id=syscall[0] if syscall else 0,
            syscall_args=tuple(syscall[1]) if syscall else (),
        )
        task.in_user = False
        task.ktf = tf
        return self.machine.deliver_event(tf)

    def handle_event(self, handler_pc: int, tf: TrapFrame):
        """Kernel-side trap handling; the resume value propagates back
        through deliver_event to whoever injected the trap."""
        task = self.current
        if task is None:
            return None
        if tf.cause is Cause.SYSCALL:
            ret = self.syscall_dispatch(task, tf.syscall_id, list(tf.syscall_args), tf)
            if not task.alive or ret is None:
                return None
            tf.gprs[0] = ret & 0xFFFFFFFF
            return self.resume_current(tf)
        if tf.cause is Cause.PAGE_FAULT:
            if self.handle_page_fault(task, tf.fault_va, tf.fault_access):
                return self.resume_current(tf)
            self.ctx.log("kernel", "fatal_fault", f"tid={task.tid} va={tf.fault_va:#x}")
            task.outputs.append(("fatal_fault", tf.fault_va))
            task.alive = False
            return None
        # Timer/device: run queued kernel work, then resume whoever is
        # current (unless the work already resumed or parked it).
        work, self._work = self._work, []
        for fn in work:
            fn()
        cur = self.current
        if cur is None or not cur.alive or cur.in_user:
            return None
        return self.resume_current(cur.ktf)

    def resume_current(self, tf: TrapFrame):
        task = self.current
        if task is None or not task.alive or task.blocked:
            return None
        for _ in range(4):
            try:
                self.machine.translate(tf.pc, Access.EXEC, Mode.USER)
                break
            except Fault as f:
                if not self.handle_page_fault(task, f.va, Access.EXEC):
                    task.alive = False
                    return None
        frame = self.machine.return_to_user(tf)
        if frame is None:
            return None
        task.in_user = True
        task.user_pc = frame.pc
        task.sp = frame.sp
        return frame

    def park_current(self):
        """Trap the running task and leave it waiting in-kernel; its real
        context sits with the Guardian (or in its kernel frame)."""
        t = self.current
        if t is not None and t.in_user:
            self._work.append(lambda: setattr(self, "current", None))
            self.trap(t, Cause.TIMER)
        self.current = None

    def ensure_user(self, task: Task):
        """Bring a task onto the CPU in user mode, preempting the current
        one if needed."""
        if not task.alive:
            raise RuntimeError(f"task {task.tid} is dead")
        if self.current is task and task.in_user:
            return
        if self.current is not None and self.current.in_user and self.current is not task:
            self._work.append(lambda: self._switch_to(task))
            self.trap(self.current, Cause.TIMER)
            return
        self._switch_to(task)

    def _switch_to(self, task: Task):
        self.context_switch(task)
        if not task.in_user and task.ktf is not None:
            self.resume_current(task.ktf)

    def resume_thread(self, task: Task, sp: int):
        """Resume a cloned thread: same process, recognized by its stack
        pointer."""
        if self.current is not task:
            if self.current is not None and self.current.in_user:
                self.park_current()
            self.context_switch(task)
        elif task.in_user:
            self.park_current()
            self.context_switch(task)
        tf = (task.ktf or TrapFrame()).copy()
        tf.sp = sp
        return self.resume_current(tf)

    def tick(self):
        """Round-robin preemption point."""
        runnable = [t for t in self.tasks.values() if t.alive and not t.blocked]
        if not runnable:
            return
        if self.current in runnable:
            idx = (runnable.index(self.current) + 1) % len(runnable)
        else:
            idx = 0
        self.ensure_user(runnable[idx])

    # -- user access (scripted process execution) -----------------------------------

    def user_write(self, task: Task, va: int, data: bytes) -> bool:
        self.ensure_user(task)
        off = 0
        while off < len(data):
            take = min(len(data) - off, PAGE_SIZE - ((va + off) & (PAGE_SIZE - 1)))
            if not self._user_try(task, va + off, data[off : off + take], None):
                return False
            off += take
        return True

    def user_read(self, task: Task, va: int, n: int):
        self.ensure_user(task)
        out = b""
        while n > 0:
            take = min(n, PAGE_SIZE - (va & (PAGE_SIZE - 1)))
            chunk = self._user_try(task, va, None, take)
            if chunk is None:
                return None
            out += chunk
            va += take
            n -= take
        return out

    def _user_try(self, task: Task, va: int, data, nread):
        for _ in range(6):
            try:
                if data is not None:
                    self.machine.mem_write(va, data, Mode.USER)
                    return True
                return self.machine.mem_read(va, nread, Mode.USER)
            except Fault as f:
                access = Access.WRITE if data is not None else Access.READ
                self.trap(task, Cause.PAGE_FAULT, fault_va=f.va, access=access)
                if not task.alive:
                    return None
                if not task.in_user:
                    self.ensure_user(task)
        return None

    # -- paging ------------------------------------------------------------------

    def _segment_for(self, task: Task, vaddr: int):
        for seg in task.image.segments:
            if seg.vaddr <= vaddr < seg.vaddr + seg.pages * PAGE_SIZE:
                return seg
        return None

    def handle_page_fault(self, task: Task, fault_va: int, access) -> bool:
        vpn = vpn_of(fault_va)
        vma = task.vma_at(fault_va)
        if vma is None:
            return False

        if task.sensitive and vma.kind is VmaKind.TRAMPOLINE and not task.in_user:
            # Trapped return landed on an unmapped trampoline: map it into
            # the cloak table, read-only-execute.
            tramp_frame = task.pages.get(vpn)
            if tramp_frame is None:
                return False
            res = self.set_pte(task, task.cloak_root, vpn, Pte(True, False, True, tramp_frame))
            return res.ok

        if vpn in task.claims:
            return self._resolve_claim(task, vpn)
        if vpn in task.swapped:
            return self.swap_in(task, vpn)
        if vpn in task.pages:
            if access is Access.WRITE and not task.sensitive and vpn in task.cow_shared:
                return self._resolve_cow(task, vpn)
            pte = self.read_pte(task.user_root, vpn)
            if pte.present and not pte.writable and vma.prot_w and access is Access.WRITE:
                res = self.set_pte(task, task.user_root, vpn, Pte(True, True, True, pte.frame_no))
                return res.ok
            return False

        seg = self._segment_for(task, fault_va) if vma.kind is VmaKind.FILE else None
        fno = self.alloc_frame()
        if seg is not None:
            idx = (page_base(fault_va) - seg.vaddr) // PAGE_SIZE
            if seg.sealed:
                self.kwrite_frame(fno, seg.sealed[idx].ciphertext)
            else:
                self.kwrite_frame(fno, seg.plaintext_page(idx))
        elif not task.sensitive:
            self.kwrite_frame(fno, bytes(PAGE_SIZE))
        res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w, True, fno))
        if not res.ok:
            self.free_frame(fno)
            self.ctx.log("kernel", "map_failed", f"tid={task.tid} va={fault_va:#x}: {res.reason}")
            return False
        task.pages[vpn] = fno
        return True

    def _resolve_claim(self, task: Task, vpn: int) -> bool:
        """Map a pending transient frame (fork or migration leftover)."""
        frames = task.claims.get(vpn, [])
        if not frames:
            return False
        fno = frames[0]
        shared_with = [
            t for t in self.tasks.values() if t is not task and vpn in t.claims and fno in t.claims[vpn]
        ]
        if shared_with:
            dst = self.alloc_frame()
            res = self.guardian.g_copy_page(fno, dst)
            if res.status is Status.RETRY:
                if not self.handle_page_fault(task, res.fault_va, Access.WRITE):
                    return False
                return self._resolve_claim(task, vpn)
            if not res.ok:
                self.free_frame(dst)
                return False
            target = dst  # the sibling keeps its claim on the original frame
        else:
            target = fno
        vma = task.vma_at(vpn << PAGE_SHIFT)
        res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w, True, target))
        if not res.ok:
            return False
        del task.claims[vpn]
        task.pages[vpn] = target
        return True

    def _resolve_cow(self, task: Task, vpn: int) -> bool:
        old = task.pages[vpn]
        sharers = [
            t for t in self.tasks.values() if t is not task and t.pages.get(vpn) == old and vpn in t.cow_shared
        ]
        vma = task.vma_at(vpn << PAGE_SHIFT)
        if not sharers:
            task.cow_shared.discard(vpn)
            res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w, True, old))
            return res.ok
        fno = self.alloc_frame()
        self.kwrite_frame(fno, self.kread(old * PAGE_SIZE, PAGE_SIZE))
        res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w, True, fno))
        if not res.ok:
            self.free_frame(fno)
            return False
        task.cow_shared.discard(vpn)
        task.pages[vpn] = fno
        return True

    # -- swapping -----------------------------------------------------------------

    def swap_out(self, task: Task, vpn: int, compress: bool = False) -> int | None:
        fno = task.pages.get(vpn)
        if fno is None:
            return None
        res = self.set_pte(task, task.user_root, vpn, Pte(False))
        if not res.ok:
            self.ctx.log("kernel", "swap_out_failed", f"tid={task.tid} vpn={vpn:#x}: {res.reason}")
            return None
        data = self.kread(fno * PAGE_SIZE, PAGE_SIZE)
        sealed = task.sensitive
        compressed = False
        if compress:
            packed = zlib.compress(data)
            self.compress_ratios.append(min(2000, len(packed) * 1000 // PAGE_SIZE))
            self.ctx.counters.bump("compress_ops")
            data = packed
            compressed = True
        slot = SwapSlot(self._next_slot, bytes(data), (task.tid, vpn), sealed, compressed)
        self._next_slot += 1
        self.swap[slot.slot_id] = slot
        del task.pages[vpn]
        task.swapped[vpn] = slot.slot_id
        self.free_frame(fno)
        return slot.slot_id

    def swap_in(self, task: Task, vpn: int) -> bool:
        slot_id = task.swapped.get(vpn)
        if slot_id is None:
            return False
        slot = self.swap[slot_id]
        data = zlib.decompress(slot.data) if slot.compressed else slot.data
        fno = self.alloc_frame()
        self.kwrite_frame(fno, data)
        vma = task.vma_at(vpn << PAGE_SHIFT)
        res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w if vma else True, True, fno))
        if not res.ok:
            self.free_frame(fno)
            self.ctx.log("kernel", "swap_in_failed", f"tid={task.tid} vpn={vpn:#x}: {res.reason}")
            return False
        del task.swapped[vpn]
        del self.swap[slot_id]
        task.pages[vpn] = fno
        return True

    def pick_swap_victim(self, task: Task):
        """Second-chance-ish: seeded choice among unpinned resident pages."""
        resident = [
            v for v in sorted(task.pages)
            if (vma := task.vma_at(v << PAGE_SHIFT)) is None or vma.kind is not VmaKind.TRAMPOLINE
        ]
        if not resident:
            return None
        return resident[self.ctx.rng.randrange(len(resident))]

    # -- migration ------------------------------------------------------------------

    def migrate_page(self, task: Task, vpn: int, dst: int | None = None) -> bool:
        src = task.pages.get(vpn)
        if src is None:
            return False
        vma = task.vma_at(vpn << PAGE_SHIFT)
        if vma is not None and vma.kind is VmaKind.TRAMPOLINE:
            return False  # pinned: mapped by both the user and cloak tables
        if not task.sensitive or (vma is not None and vma.shared):
            new = dst if dst is not None else self.alloc_frame()
            self.kwrite_frame(new, self.kread(src * PAGE_SIZE, PAGE_SIZE))
            res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w, True, new))
            if not res.ok:
                self.free_frame(new)
                return False
            task.pages[vpn] = new
            self.free_frame(src)
            return True
        if self.ctx.config.secure_abi:
            new = dst if dst is not None else self.alloc_frame()
            for _ in range(4):
                res = self.guardian.g_copy_page(src, new)
                if res.status is Status.RETRY:
                    if not self.handle_page_fault(task, res.fault_va, Access.WRITE):
                        return False
                    continue
                break
            if not res.ok:
                self.free_frame(new)
                return False
            res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w, True, new))
            if not res.ok:
                return False
            task.pages[vpn] = new
            self.free_frame(src)  # Guardian scrubbed it back to a normal frame
            return True
        # Fallback: encrypted view round trip (seal on unmap, open on remap).
        res = self.set_pte(task, task.user_root, vpn, Pte(False))
        if not res.ok:
            return False
        new = dst if dst is not None else self.alloc_frame()
        self.kwrite_frame(new, self.kread(src * PAGE_SIZE, PAGE_SIZE))
        res = self.set_pte(task, task.user_root, vpn, Pte(True, vma.prot_w, True, new))
        if not res.ok:
            return False
        task.pages[vpn] = new
        self.free_frame(src)
        return True

    def migrate_all(self, task: Task) -> int:
        """migrate_pages: move every resident page, data pages before the
        signature levels so slot writes find their hosts resident."""

        def level(vpn):
            if vpn < SPAN_PAGES:
                return 0
            sva = sig_slot_va(vpn)
            return 2 if sva == -1 else 1

        moved = 0
        for vpn in sorted(task.pages, key=lambda v: (level(v), v)):
            if self.migrate_page(task, vpn):
                moved += 1
        return moved

    # -- fork ----------------------------------------------------------------------

    def do_fork(self, parent: Task) -> Task | None:
        child = Task(
            tid=self._next_tid,
            name=parent.name + "+child",
            sensitive=parent.sensitive,
            image=parent.image,
        )
        self._next_tid += 1
        child.vmas = [Vma(v.start, v.end, v.kind, v.prot_w, v.shared, v.seg_vaddr) for v in parent.vmas]
        child.handlers = dict(parent.handlers)
        child.sp = parent.sp
        child.user_pc = parent.user_pc
        child.user_root = self.alloc_frame()
        self.kwrite_frame(child.user_root, bytes(PAGE_SIZE))

        tramp_vpn = vpn_of(self.guardian.by_user_root[parent.user_root].trampoline_va) if parent.sensitive else None

        if parent.sensitive:
            child.cloak_root = self.alloc_frame()
            self.kwrite_frame(child.cloak_root, bytes(PAGE_SIZE))
            # Shared VMA pages and the trampoline are plain mappings.
            for vpn, fno in parent.pages.items():
                vma = parent.vma_at(vpn << PAGE_SHIFT)
                if vpn == tramp_vpn or (vma is not None and vma.shared):
                    self._raw_map(child.user_root, vpn, self.read_pte(parent.user_root, vpn))
                    child.pages[vpn] = fno
            res = self.guardian.g_fork(child.user_root, child.cloak_root)
            for _ in range(40):
                if res.status is not Status.RETRY:
                    break
                if not self.handle_page_fault(parent, res.fault_va, Access.WRITE):
                    return None
                res = self.guardian.g_fork(child.user_root, child.cloak_root)
            if not res.ok:
                self.ctx.log("kernel", "fork_rejected", res.reason)
                return None
            # Every private resident page went transient, claimable by both.
            for vpn in list(parent.pages):
                vma = parent.vma_at(vpn << PAGE_SHIFT)
                if vpn == tramp_vpn or (vma is not None and vma.shared):
                    continue
                fno = parent.pages.pop(vpn)
                parent.claims.setdefault(vpn, []).append(fno)
                child.claims.setdefault(vpn, []).append(fno)
            # Swap slots are duplicated for the child.
            for vpn, slot_id in parent.swapped.items():
                slot = self.swap[slot_id]
                dup = SwapSlot(self._next_slot, slot.data, (child.tid, vpn), slot.sealed, slot.compressed)
                self._next_slot += 1
                self.swap[dup.slot_id] = dup
                child.swapped[vpn] = dup.slot_id
        else:
            for vpn, fno in sorted(parent.pages.items()):
                vma = parent.vma_at(vpn << PAGE_SHIFT)
                pte = self.read_pte(parent.user_root, vpn)
                if vma is not None and vma.shared:
                    self._raw_map(child.user_root, vpn, pte)
                    child.pages[vpn] = fno
                    continue
                if pte.writable:
                    self.set_pte(parent, parent.user_root, vpn, Pte(True, False, True, fno))
                self._raw_map(child.user_root, vpn, Pte(True, False, True, fno))
                child.pages[vpn] = fno
                parent.cow_shared.add(vpn)
                child.cow_shared.add(vpn)
            for vpn, slot_id in parent.swapped.items():
                slot = self.swap[slot_id]
                dup = SwapSlot(self._next_slot, slot.data, (child.tid, vpn), slot.sealed, slot.compressed)
                self._next_slot += 1
                self.swap[dup.slot_id] = dup
                child.swapped[vpn] = dup.slot_id

        child.ktf = parent.ktf.copy() if parent.ktf else TrapFrame(pc=parent.user_pc, sp=parent.sp)
        child.ktf.gprs[0] = 0  # fork returns 0 in the child
        child.in_user = False
        self.tasks[child.tid] = child
        return child

    # -- semantic access ----------------------------------------------------------------

    def copy_user(self, task: Task, direction: str, uaddr: int, length: int, data: bytes = b""):
        """copy_{from,to}_user: sensitive tasks go through one Guardian
        call per page-bounded chunk; others dereference the user mapping
        directly."""
        if not task.sensitive:
            return self._copy_user_plain(task, direction, uaddr, length, data)
        out = b""
        off = 0
        kbuf_va = direct_map_va(self.kbuf_frame * PAGE_SIZE)
        while off < length:
            take = min(length - off, PAGE_SIZE - ((uaddr + off) & (PAGE_SIZE - 1)), PAGE_SIZE)
            for _ in range(4):
                if direction == "to_user":
                    self.kwrite(self.kbuf_frame * PAGE_SIZE, data[off : off + take])
                res = self.guardian.g_move_umem(direction, uaddr + off, kbuf_va, take, task.sp)
                if res.status is Status.RETRY:
                    if not self.handle_page_fault(task, res.fault_va, Access.READ):
                        return None
                    continue
                break
            if res.status is Status.DENIED or not res.ok:
                self.ctx.log("kernel", "copy_user_denied", f"tid={task.tid} uaddr={uaddr + off:#x}")
                return None
            if direction == "to_kernel":
                out += self.kread(self.kbuf_frame * PAGE_SIZE, take)
            off += take
        return out if direction == "to_kernel" else length

    def _copy_user_plain(self, task: Task, direction: str, uaddr: int, length: int, data: bytes):
        out = b""
        off = 0
        while off < length:
            take = min(length - off, PAGE_SIZE - ((uaddr + off) & (PAGE_SIZE - 1)))
            pte = self.read_pte(task.user_root, vpn_of(uaddr + off))
            if not pte.present:
                if not self.handle_page_fault(task, uaddr + off, Access.READ):
                    return None
                continue
            pa = pte.frame_no * PAGE_SIZE + ((uaddr + off) & (PAGE_SIZE - 1))
            if direction == "to_kernel":
                out += self.machine.phys.read(pa, take)
            else:
                self.machine.phys.write(pa, data[off : off + take])
            off += take
        return out if direction == "to_kernel" else length

    # -- syscalls -------------------------------------------------------------------------

    def do_syscall(self, task: Task, name: str, args: list):
        self.ensure_user(task)
        if name in capsys.SYSCALL_IDS:
            sid = capsys.SYSCALL_IDS[name]
        else:
            sid = next((i for i, n in UNSUPPORTED_SYSCALLS.items() if n == name), None)
            if sid is None:
                raise ValueError(f"unknown syscall {name!r}")
        frame = self.trap(task, Cause.SYSCALL, syscall=(sid, args))
        if frame is None:
            return None
        ret = frame.gprs[0]
        task.outputs.append(("syscall", name, ret))
        return ret

    def syscall_dispatch(self, task: Task, sid: int, args: list, tf: TrapFrame):
        if sid in UNSUPPORTED_SYSCALLS:
            self.ctx.log("kernel", "unsupported_syscall", UNSUPPORTED_SYSCALLS[sid])
            return ENOSYS
        spec = capsys.DEFAULT_SPECS.get(sid)
        if spec is None:
            return ENOSYS
        handler = getattr(self, "_sys_" + spec.name, None)
        if handler is None:
            return ENOSYS
        return handler(task, args)

    def _sys_open(self, task, args):
        path_va = args[0]
        raw = self.copy_user(task, "to_kernel", path_va, 64)
        if raw is None:
            return EFAULT
        name = raw.split(b"\0", 1)[0].decode("latin1")
        self.fs.setdefault(name, bytearray())
        fd = task.next_fd
        task.next_fd += 1
        task.fds[fd] = [name, 0]
        return fd

    def _sys_close(self, task, args):
        task.fds.pop(args[0], None)
        return 0

    def _sys_read(self, task, args):
        fd, buf, count = args[0], args[1], args[2]
        ent = task.fds.get(fd)
        if ent is None:
            return EFAULT
        name, off = ent
        data = bytes(self.fs.get(name, b"")[off : off + count])
        if data:
            got = self.copy_user(task, "to_user", buf, len(data), data)
            if got is None:
                return EFAULT
        ent[1] = off + len(data)
        return len(data)

    def _sys_write(self, task, args):
        fd, buf, count = args[0], args[1], args[2]
        ent = task.fds.get(fd)
        if ent is None:
            return EFAULT
        data = self.copy_user(task, "to_kernel", buf, count)
        if data is None:
            return EFAULT
        name, off = ent
        f = self.fs.setdefault(name, bytearray())
        if len(f) < off:
            f.extend(bytes(off - len(f)))
        f[off : off + len(data)] = data
        ent[1] = off + len(data)
        return len(data)

    def _sys_mmap(self, task, args):
        length = args[1]
        pages = (length + PAGE_SIZE - 1) // PAGE_SIZE
        if pages <= 0:
            return MAP_FAILED
        shared = bool(args[3] & 1)
        va = MMAP_BASE
        taken = sorted((v.start, v.end) for v in task.vmas)
        while any(a < va + pages * PAGE_SIZE and va < b for a, b in taken):
            va += PAGE_SIZE
            if va + pages * PAGE_SIZE > SPAN_PAGES * PAGE_SIZE:
                return MAP_FAILED
        task.vmas.append(Vma(va, va + pages * PAGE_SIZE, VmaKind.ANON, True, shared=shared))
        return va

    def _sys_munmap(self, task, args):
        start, length = args[0], args[1]
        end = start + ((length + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1))
        vma = next((v for v in task.vmas if v.start == start and v.end == end), None)
        if vma is None:
            return EFAULT
        return self._free_vma(task, vma)

    def _free_vma(self, task, vma):
        if task.sensitive:
            res = self.guardian.g_free_vma((vma.start, vma.end))
            if not res.ok:
                return EFAULT
        for vpn in range(vpn_of(vma.start), vpn_of(vma.end)):
            fno = task.pages.pop(vpn, None)
            if fno is not None:
                if not task.sensitive:
                    self.set_pte(task, task.user_root, vpn, Pte(False))
                self.free_frame(fno)
            slot = task.swapped.pop(vpn, None)
            if slot is not None:
                self.swap.pop(slot, None)
            task.claims.pop(vpn, None)
        task.vmas.remove(vma)
        return 0

    def _sys_brk(self, task, args):
        new_end = args[0]
        heap = next(v for v in task.vmas if v.start == HEAP_VA and v.kind is VmaKind.ANON)
        if new_end == 0:
            return heap.end
        end = (new_end + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1)
        if end < HEAP_VA or end > MMAP_BASE:
            return heap.end
        heap.end = end
        return end

    def _sys_fork(self, task, args):
        child = self.do_fork(task)
        if child is None:
            return EAGAIN
        return child.tid

    def _sys_clone(self, task, args):
        child_stack, ctid = args[1], args[3]
        task.threads[child_stack] = {"ctid": ctid}
        return 0x1000 + len(task.threads)

    def _sys_exit(self, task, args):
        for sp, rec in task.threads.items():
            if rec.get("ctid"):
                self.copy_user(task, "to_user", rec["ctid"], 8, bytes(8))
        if task.tid_clear_addr:
            self.copy_user(task, "to_user", task.tid_clear_addr, 8, bytes(8))
        if task.robust_list:
            self.copy_user(task, "to_kernel", task.robust_list, 8)
        if task.sensitive:
            self.guardian.g_free_vma(None)
        for vpn, fno in task.pages.items():
            self.free_frame(fno)
        task.pages.clear()
        task.alive = False
        task.outputs.append(("exit", args[0] if args else 0))
        if self.current is task:
            self.current = None
        return None

    def _sys_sigaction(self, task, args):
        signum, act_va = args[0], args[1]
        raw = self.copy_user(task, "to_kernel", act_va, 16)
        if raw is None:
            return EFAULT
        handler = int.from_bytes(raw[0:4], "little")
        task.handlers[signum] = handler
        return 0

    def _sys_sigaltstack(self, task, args):
        raw = self.copy_user(task, "to_kernel", args[0], 16)
        if raw is None:
            return EFAULT
        return 0

    def _sys_set_tid_address(self, task, args):
        task.tid_clear_addr = args[0]
        return task.tid

    def _sys_set_robust_list(self, task, args):
        task.robust_list = args[0]
        return 0

    def _sys_migrate_pages(self, task, args):
        return self.migrate_all(task)

    def _sys_futex(self, task, args):
        uaddr, op, val = args[0], args[1], args[2]
        if op == 0:  # wait: capability check + user read + queue update, one step
            raw = self.copy_user(task, "to_kernel", uaddr, 4)
            if raw is None:
                return EFAULT
            if int.from_bytes(raw, "little") == val:
                self.futex_waiters.setdefault(uaddr, []).append(task.tid)
                return 0
            return EAGAIN
        woken = len(self.futex_waiters.pop(uaddr, []))
        return woken

    def _sys_writev(self, task, args):
        iov_va, count = args[0], args[1]
        total = 0
        for i in range(count):
            ent = self.copy_user(task, "to_kernel", iov_va + i * 8, 8)
            if ent is None:
                return EFAULT
            base = int.from_bytes(ent[0:4], "little")
            length = int.from_bytes(ent[4:8], "little")
            data = self.copy_user(task, "to_kernel", base, length)
            if data is None:
                return EFAULT
            total += len(data)
        return total

    def _sys_readv(self, task, args):
        return self._sys_writev(task, args)

    # -- signals -----------------------------------------------------------------------

    def deliver_signal(self, task: Task, signum: int, spoof_pc: int | None = None) -> bool:
        """Deliver a signal at the interrupt-return point: build the signal
        frame on the (alternate) stack while the task is trapped, then
        transfer through the verified handler.  spoof_pc models a malicious
        control-transfer attempt."""
        self.ensure_user(task)
        handler = task.handlers.get(signum)
        state = {"delivered": False, "target": 0}

        def setup_and_transfer():
            if handler is None and spoof_pc is None:
                return
            target = spoof_pc if spoof_pc is not None else handler
            state["target"] = target
            frame_bytes = signum.to_bytes(4, "little") * 16
            sp_top = task.sp
            if task.sensitive:
                kbuf_va = direct_map_va(self.kbuf_frame * PAGE_SIZE)
                self.kwrite(self.kbuf_frame * PAGE_SIZE, frame_bytes)
                res = self.guardian.g_move_umem("to_user", sp_top - 64, kbuf_va, 64, task.sp)
                if res.status is Status.RETRY:
                    self.handle_page_fault(task, res.fault_va, Access.WRITE)
                    res = self.guardian.g_move_umem("to_user", sp_top - 64, kbuf_va, 64, task.sp)
                if res.ok:
                    state["delivered"] = self.guardian.g_proc_signal(target, task.sp).ok
            else:
                state["delivered"] = self.user_frame_write(task, sp_top - 64, frame_bytes)

        self._work.append(setup_and_transfer)
        self.trap(task, Cause.TIMER)
        if state["delivered"]:
            task.outputs.append(("signal", signum, state["target"]))
        if task.alive and not task.in_user:
            self.ensure_user(task)
        return state["delivered"]

    def user_frame_write(self, task: Task, va: int, data: bytes) -> bool:
        pte = self.read_pte(task.user_root, vpn_of(va))
        if not pte.present:
            if not self.handle_page_fault(task, va, Access.WRITE):
                return False
            pte = self.read_pte(task.user_root, vpn_of(va))
        self.machine.phys.write(pte.frame_no * PAGE_SIZE + (va & (PAGE_SIZE - 1)), data)
        return True

    # -- DMA --------------------------------------------------------------------------

    def dma_map(self, task: Task, iova: int, va: int) -> Result:
        pte = self.read_pte(task.user_root, vpn_of(va))
        frame = task.pages.get(vpn_of(va)) if not pte.present else pte.frame_no
        if frame is None:
            return Result(Status.REJECTED, reason="page not resident")
        return self.guardian.dma_map_check(iova, va, frame, task.user_root)

    def dma_read(self, device_name: str, iova: int, n: int):
        """Bus-master read: the device sees memory only through the IO
        table the Guardian approved."""
        dev = self.devices.setdefault(device_name, Device(device_name))
        entries = dict(self.guardian.io_entries())
        pte = entries.get(vpn_of(iova))
        if pte is None:
            return None
        data = self.machine.phys.read(pte.frame_no * PAGE_SIZE + (iova & (PAGE_SIZE - 1)), n)
        dev.buffer.extend(data)
        return data

    def dma_write(self, device_name: str, iova: int, data: bytes) -> bool:
        entries = dict(self.guardian.io_entries())
        pte = entries.get(vpn_of(iova))
        if pte is None:
            return False
        self.machine.phys.write(pte.frame_no * PAGE_SIZE + (iova & (PAGE_SIZE - 1)), data)
        return True
