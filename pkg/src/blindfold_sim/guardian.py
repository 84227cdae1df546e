"""The trusted reference monitor.

The Guardian owns nothing the kernel needs, but mediates everything that
could expose sensitive memory: virtual-memory control updates, page-table
words, interrupt delivery for sensitive processes, semantic copies in and
out of user space, and the sealed/clear view transitions of sensitive
pages.  Its security invariants:

  * virtual memory stays enabled after boot;
  * every page-table word is written by Guardian code;
  * the kernel never runs with a sensitive user page table loaded;
  * a sensitive page is sealed, or exclusively mapped in its owner's user
    table in clear text, or (transiently) in clear text with no mapping
    at all.

Per-page digests live in a reserved user-space signature region.  When the
kernel pushes a signature page out, its digest chains into the next level
of that region, and the digest of the top page is anchored here, so sealed
pages verify through a lazily built hash tree ending in Guardian memory.
When the Guardian itself needs a signature slot whose hosting page is not
resident it returns Retry(fault_va) and the kernel resolves the fault and
reissues, the same delegation used for semantic-copy faults.
"""

from dataclasses import dataclass, field
import enum
import functools
import struct

from . import capsys, crypto
from .binadapt import SegKind, image_page_aad, verify_and_extract
from .layout import (
    DIGEST_SIZE,
    HEAP_VA,
    KERNEL_BASE,
    L1_ENTRIES,
    L2_ENTRIES,
    PAGE_SHIFT,
    PAGE_SIZE,
    ROOT_SLOT,
    SIG_REGION_VA,
    SPAN_PAGES,
    STACK_BASE,
    STACK_CAP_SPAN,
    STACK_TOP,
    TRAMPOLINE_VA,
    USER_SPAN,
    direct_map_va,
    is_user_va,
    page_base,
    sig_slot_va,
    vpn_of,
)
from .simhw import (
    Access,
    Cause,
    Machine,
    Mode,
    Pte,
    TrapFrame,
    VmcField,
    write_interrupt_table,
)

WORD = 4

# Kernel handler entry points published in the interrupt tables.  They are
# symbolic: the kernel's event dispatcher keys on them.
HANDLER_PCS = {
    Cause.SYSCALL: 0x8F00_0000,
    Cause.PAGE_FAULT: 0x8F00_0100,
    Cause.TIMER: 0x8F00_0200,
    Cause.DEVICE: 0x8F00_0300,
}

GUARDIAN_FRAME_COUNT = 16       # static self-protected range at the top of memory
GUARDIAN_ASID_BASE = 128        # ASIDs >= base are Guardian-assigned
IO_SPAN_PAGES = 1024            # single-level IO table: IOVAs below 4 MiB

ZERO_DIGEST = bytes(DIGEST_SIZE)


class FrameState(enum.Enum):
    FREE = "free"
    NORMAL = "normal"
    PT_PAGE = "pt_page"
    IT_PAGE = "it_page"
    GUARDIAN_OWNED = "guardian_owned"
    SENSITIVE_CLEAR = "sensitive_clear"
    SENSITIVE_ENCRYPTED = "sensitive_encrypted"
    SENSITIVE_TRANSIENT = "sensitive_transient"


SENSITIVE_STATES = (
    FrameState.SENSITIVE_CLEAR,
    FrameState.SENSITIVE_ENCRYPTED,
    FrameState.SENSITIVE_TRANSIENT,
)


@dataclass
class FrameInfo:
    state: FrameState = FrameState.FREE
    refcount: int = 0
    owner: int | None = None          # proc id for sensitive states
    vpn: int | None = None
    transient_digest: bytes | None = None
    claimants: set = field(default_factory=set)

    @property
    def sensitive(self) -> bool:
        return self.state in SENSITIVE_STATES


class Status(enum.Enum):
    APPLIED = "applied"
    REJECTED = "rejected"
    RETRY = "retry"
    INTEGRITY = "integrity_failure"
    DENIED = "denied"


@dataclass
class Result:
    status: Status
    reason: str = ""
    fault_va: int = 0
    value: object = None

    @property
    def ok(self) -> bool:
        return self.status is Status.APPLIED


def applied(value=None) -> Result:
    return Result(Status.APPLIED, value=value)


def rejected(reason: str) -> Result:
    return Result(Status.REJECTED, reason=reason)


def retry(fault_va: int) -> Result:
    return Result(Status.RETRY, fault_va=fault_va)


def integrity_failure(reason: str) -> Result:
    return Result(Status.INTEGRITY, reason=reason)


def denied(reason: str) -> Result:
    return Result(Status.DENIED, reason=reason)


class VmaStatus(enum.Enum):
    MAPPED = "mapped"
    FREED = "freed"
    SHARED = "shared"


@dataclass
class VmaRecord:
    start: int
    end: int
    status: VmaStatus


class SealKind(enum.Enum):
    IMAGE = "image"    # sealed at adaptation time under the image key
    RUNTIME = "runtime"


@dataclass
class SealMeta:
    kind: SealKind
    nonce: bytes
    tag: bytes


@dataclass
class ProcRecord:
    pid: int
    crypto_id: int                     # fork lineage; binds sealed pages
    user_ptbr: int
    cloak_ptbr: int
    trampoline_va: int
    sig_region_va: int
    orig_entry: int
    keys: list                         # [image key, runtime key]
    user_asid: int
    cloak_asid: int
    caps: capsys.CapStore = field(default_factory=capsys.CapStore)
    saved_ctx: dict = field(default_factory=dict)        # sp -> TrapFrame
    pending_syscall: dict = field(default_factory=dict)  # sp -> (id, args)
    vmas: list = field(default_factory=list)             # sorted VmaRecords
    root_digest: bytes | None = None
    nonce_counter: int = 0
    seal_meta: dict = field(default_factory=dict)        # vpn -> SealMeta
    segment_digests: dict = field(default_factory=dict)  # vpn -> digest (image)
    signal_handlers: set = field(default_factory=set)
    alt_stack: tuple | None = None                       # (base, size)

    @property
    def seal_key(self):
        return self.keys[1]

    def next_nonce(self) -> bytes:
        n = crypto.make_nonce(self.pid, self.nonce_counter)
        self.nonce_counter += 1
        return n

    def vma_at(self, va: int):
        for vma in self.vmas:
            if vma.start <= va < vma.end:
                return vma
        return None

    def add_vma(self, start: int, end: int, status: VmaStatus):
        self.vmas.append(VmaRecord(start, end, status))
        self.vmas.sort(key=lambda v: v.start)

    def page_aad(self, vpn: int, kind: SealKind) -> bytes:
        if kind is SealKind.IMAGE:
            return image_page_aad(vpn)
        return b"proc-page:" + struct.pack("<II", self.crypto_id, vpn)


def abi(name):
    """Count the call, then run the paranoid sweep hook on outermost exit."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(self, *args, **kwargs):
            self.ctx.enter_abi(name)
            try:
                return fn(self, *args, **kwargs)
            finally:
                self.ctx.exit_abi()

        return wrapper

    return deco


class Guardian:
    def __init__(self, machine: Machine, ctx, keypair: crypto.KeyPair):
        self.machine = machine
        self.ctx = ctx
        self.keypair = keypair
        self.frame_info = [FrameInfo() for _ in range(machine.phys.frame_count)]
        self.procs: dict[int, ProcRecord] = {}       # pid -> record
        self.by_user_root: dict[int, ProcRecord] = {}
        self.by_cloak: dict[int, ProcRecord] = {}
        self.table_meta: dict[int, tuple] = {}       # table frame -> (root, level, l1_idx)
        self.table_kind: dict[int, str] = {}         # root frame -> kernel/user/cloak/io
        self.claims: dict[tuple, list] = {}          # (pid, vpn) -> [frame, ...]
        self.pending_creates: dict[int, dict] = {}   # user root -> handle
        self.pt_journal: list = []
        self.seal_audit: set = set()                 # (key bytes, nonce) uniqueness
        self.kernel_root = 0
        self.io_root = 0
        self.normal_itbr = 0
        self.secure_itbr = 0
        self._next_pid = 1
        self._next_asid = GUARDIAN_ASID_BASE
        self.guardian_frames = range(
            machine.phys.frame_count - GUARDIAN_FRAME_COUNT, machine.phys.frame_count
        )
        self._boot_cursor = 1

    # -- boot ---------------------------------------------------------------

    def _boot_alloc(self) -> int:
        fno = self._boot_cursor
        self._boot_cursor += 1
        return fno

    def secure_boot(self) -> int:
        """Trusted initialization: build the kernel direct map and the two
        interrupt tables, lock them, enable translation, and arm the traps.
        Returns the first frame left to the kernel's allocator."""
        m = self.machine
        for fno in self.guardian_frames:
            self.frame_info[fno].state = FrameState.GUARDIAN_OWNED

        self.kernel_root = self._boot_alloc()
        n_l2 = (m.phys.frame_count + L2_ENTRIES - 1) // L2_ENTRIES
        l2_frames = [self._boot_alloc() for _ in range(n_l2)]
        self.normal_itbr = self._boot_alloc()
        self.secure_itbr = self._boot_alloc()
        self.io_root = self._boot_alloc()

        table_frames = {self.kernel_root, self.io_root, *l2_frames}
        it_frames = {self.normal_itbr, self.secure_itbr}

        # Direct map: kernel VA = KERNEL_BASE + pa.  Table and interrupt
        # frames are read-only; Guardian frames are simply absent.
        for chunk, l2 in enumerate(l2_frames):
            words = []
            for j in range(L2_ENTRIES):
                fno = chunk * L2_ENTRIES + j
                if fno >= m.phys.frame_count or fno in self.guardian_frames or fno == 0:
                    words.append(0)
                    continue
                writable = fno not in table_frames and fno not in it_frames
                words.append(Pte(True, writable, False, fno).encode())
            m.phys.write_frame(l2, struct.pack("<1024I", *words))
            l1_idx = (KERNEL_BASE >> 22) + chunk
            m.phys.write_word(
                self.kernel_root * PAGE_SIZE + WORD * l1_idx,
                Pte(True, False, False, l2).encode(),
            )

        write_interrupt_table(
            m.phys, self.normal_itbr, {c: (HANDLER_PCS[c], False) for c in Cause}
        )
        write_interrupt_table(
            m.phys, self.secure_itbr, {c: (HANDLER_PCS[c], True) for c in Cause}
        )
        for fno in it_frames:
            self.frame_info[fno].state = FrameState.IT_PAGE

        m.set_vm_control(VmcField.PTBR_KERNEL, self.kernel_root, Mode.GUARDIAN)
        m.set_vm_control(VmcField.ITBR, self.normal_itbr, Mode.GUARDIAN)
        m.set_vm_control(VmcField.VM_ENABLE, True, Mode.GUARDIAN)

        self._lockdown(self.kernel_root, "kernel")
        self._lockdown(self.io_root, "io")

        m.vmc_trap_handler = self._vmc_trap_entry
        m.interrupt_hook = self.g_interrupt
        m.trampoline_hook = self._trampoline_entry
        m.locked_write_probe = self._locked_write_probe
        m.hidden_read_probe = self._hidden_read_probe

        first_free = self._boot_cursor
        for fno in range(first_free, self.guardian_frames.start):
            self.frame_info[fno].state = FrameState.NORMAL
        return first_free

    def _locked_write_probe(self, va: int) -> bool:
        if va >= KERNEL_BASE:
            fno = (va - KERNEL_BASE) >> PAGE_SHIFT
            if fno < len(self.frame_info):
                return self.frame_info[fno].state in (
                    FrameState.PT_PAGE,
                    FrameState.IT_PAGE,
                    FrameState.GUARDIAN_OWNED,
                    FrameState.SENSITIVE_CLEAR,
                )
        return False

    def _hidden_read_probe(self, va: int) -> bool:
        if va >= KERNEL_BASE:
            fno = (va - KERNEL_BASE) >> PAGE_SHIFT
            if fno < len(self.frame_info):
                return self.frame_info[fno].state in (
                    FrameState.GUARDIAN_OWNED,
                    FrameState.SENSITIVE_CLEAR,
                    FrameState.SENSITIVE_TRANSIENT,
                )
        return False

    # -- page-table plumbing --------------------------------------------------

    def _write_pte(self, table_frame: int, index: int, new: Pte, leaf: bool = True):
        """The only place page-table words change.  Maintains refcounts for
        leaf mappings, journals the edit, and shoots down stale TLB entries."""
        pa = table_frame * PAGE_SIZE + WORD * index
        old_word = self.machine.phys.read_word(pa)
        old = Pte.decode(old_word)
        self.machine.phys.write_word(pa, new.encode())
        self.pt_journal.append((self.ctx.step, table_frame, index, old_word, new.encode()))
        if leaf:
            if old.present:
                self.frame_info[old.frame_no].refcount -= 1
                self.machine.tlb.invalidate_frame(old.frame_no)
            if new.present:
                self.frame_info[new.frame_no].refcount += 1
        meta = self.table_meta.get(table_frame)
        if meta is not None and meta[1] == 2:
            vpn = (meta[2] << 10) | index
            self.machine.tlb.invalidate_vpn(vpn)
        elif table_frame == self.kernel_root or (meta is not None and meta[1] == 1):
            self.machine.tlb.flush_all()
            self.ctx.counters.bump("tlb_flushes")

    def _set_direct_map(self, fno: int, present: bool, writable: bool = True):
        l2 = self._direct_l2(fno)
        self._write_pte(l2, fno % L2_ENTRIES, Pte(present, writable, False, fno))

    def _direct_l2(self, fno: int) -> int:
        l1_idx = (KERNEL_BASE >> 22) + fno // L2_ENTRIES
        word = self.machine.phys.read_word(self.kernel_root * PAGE_SIZE + WORD * l1_idx)
        return word >> PAGE_SHIFT

    def _walk_user(self, proc: ProcRecord, va: int):
        return self.machine.walk(proc.user_ptbr, va)

    def _find_leaf_slot(self, root: int, vpn: int):
        """(l2_frame, index) for a vpn under a locked root, or None when the
        L1 link is absent."""
        l1_idx = vpn >> 10
        word = self.machine.phys.read_word(root * PAGE_SIZE + WORD * l1_idx)
        if not word & 1:
            return None
        return word >> PAGE_SHIFT, vpn & (L2_ENTRIES - 1)

    def _lockdown(self, root: int, kind: str, owner: ProcRecord | None = None) -> Result:
        """First-sight walk: mark table frames read-only, recount references,
        and strip mappings to protected frames.  Idempotent."""
        if root in self.table_kind:
            return applied()
        info = self.frame_info[root]
        if info.state not in (FrameState.NORMAL, FrameState.FREE):
            return rejected(f"root frame {root} not lockable ({info.state.value})")
        self.table_kind[root] = kind
        self.table_meta[root] = (root, 1, None)
        info.state = FrameState.PT_PAGE
        self._set_direct_map(root, True, writable=False)

        words = self.machine.phys.read_table(root)
        for l1_idx, word in enumerate(words):
            if not word & 1:
                continue
            l2 = word >> PAGE_SHIFT
            if l2 in self.table_meta or l2 >= len(self.frame_info):
                return rejected(f"table frame {l2} reused or out of range")
            l2_info = self.frame_info[l2]
            if kind != "kernel" and l2_info.state is not FrameState.NORMAL:
                return rejected(f"L2 frame {l2} not lockable ({l2_info.state.value})")
            self.table_meta[l2] = (root, 2, l1_idx)
            l2_info.state = FrameState.PT_PAGE
            self._set_direct_map(l2, True, writable=False)
            self._scrub_new_table_leaves(l2, l1_idx, kind)
        return applied()

    def _scrub_new_table_leaves(self, l2: int, l1_idx: int, kind: str):
        """Count surviving leaves of a freshly locked L2 and invalidate
        mappings to protected frames (oldest table first, index order)."""
        words = self.machine.phys.read_table(l2)
        for idx, word in enumerate(words):
            if not word & 1:
                continue
            pte = Pte.decode(word)
            target = self.frame_info[pte.frame_no]
            bad = (
                target.state is FrameState.GUARDIAN_OWNED
                or target.state is FrameState.SENSITIVE_CLEAR
                or target.state is FrameState.SENSITIVE_TRANSIENT
                or (
                    target.state in (FrameState.PT_PAGE, FrameState.IT_PAGE)
                    and (pte.writable or kind in ("user", "cloak"))
                )
            )
            if bad:
                self.machine.phys.write_word(l2 * PAGE_SIZE + WORD * idx, 0)
                self.pt_journal.append((self.ctx.step, l2, idx, word, 0))
                self.ctx.log("guardian", "lockdown_invalidate", f"l2={l2} idx={idx} frame={pte.frame_no}")
            else:
                target.refcount += 1
                if target.state is FrameState.FREE:
                    target.state = FrameState.NORMAL

    def lockdown_page_table(self, root: int, kind: str = "user") -> Result:
        return self._lockdown(root, kind)

    # -- signature slots ------------------------------------------------------

    def _slot_location(self, proc: ProcRecord, vpn: int):
        """Resolve the signature slot of a vpn.  Returns ('root', None),
        ('mem', pa), ('fault', slot_va) when the hosting signature page
        exists but is not resident in clear text, or ('virgin', slot_va)
        when it has never been materialized (slot necessarily unwritten)."""
        sva = sig_slot_va(vpn)
        if sva == ROOT_SLOT:
            return ("root", None)
        if sva is None:
            return ("none", None)
        pte = self._walk_user(proc, sva)
        if pte is not None:
            info = self.frame_info[pte.frame_no]
            if info.state is FrameState.SENSITIVE_CLEAR and info.owner == proc.pid:
                return ("mem", pte.frame_no * PAGE_SIZE + (sva & (PAGE_SIZE - 1)))
            return ("fault", sva)
        sig_vpn = vpn_of(sva)
        if sig_vpn in proc.seal_meta or (proc.pid, sig_vpn) in self.claims:
            return ("fault", sva)
        return ("virgin", sva)

    def _slot_read(self, proc: ProcRecord, vpn: int):
        where, loc = self._slot_location(proc, vpn)
        if where == "root":
            return proc.root_digest or ZERO_DIGEST
        if where == "fault":
            return retry(loc)
        if where in ("none", "virgin"):
            return ZERO_DIGEST
        return self.machine.phys.read(loc, DIGEST_SIZE)

    def _slot_write(self, proc: ProcRecord, vpn: int, value: bytes):
        where, loc = self._slot_location(proc, vpn)
        if where == "root":
            proc.root_digest = value
            return applied()
        if where in ("fault", "virgin"):
            return retry(loc)
        if where == "none":
            return rejected(f"vpn {vpn:#x} has no signature slot")
        self.machine.phys.write(loc, value)
        return applied()

    def _expected_digest(self, proc: ProcRecord, vpn: int):
        got = self._slot_read(proc, vpn)
        if isinstance(got, Result):
            return got
        if got != ZERO_DIGEST:
            return got
        return proc.segment_digests.get(vpn, ZERO_DIGEST)

    # -- view transitions -------------------------------------------------------

    def _seal(self, proc: ProcRecord, vpn: int, plaintext: bytes):
        nonce = proc.next_nonce()
        key = proc.seal_key
        audit_key = (key.bytes, nonce)
        if audit_key in self.seal_audit:
            raise AssertionError("(key, nonce) reuse")
        self.seal_audit.add(audit_key)
        self.ctx.counters.bump("seal_ops")
        sealed = crypto.seal(key, nonce, plaintext, proc.page_aad(vpn, SealKind.RUNTIME))
        return sealed, SealMeta(SealKind.RUNTIME, nonce, sealed.tag)

    def encrypt_and_unmap(self, proc: ProcRecord, vpn: int, frame: int, l2: int, idx: int) -> Result:
        """SensitiveClear -> SensitiveEncrypted: digest to the signature
        slot, seal in place, reopen the kernel direct mapping."""
        where, loc = self._slot_location(proc, vpn)
        if where in ("fault", "virgin"):
            return retry(loc)
        plaintext = self.machine.phys.read_frame(frame)
        self.ctx.counters.bump("digest_ops")
        d = crypto.digest(plaintext)
        res = self._slot_write(proc, vpn, d)
        if not res.ok:
            return res
        sealed, meta = self._seal(proc, vpn, plaintext)
        self.machine.phys.write_frame(frame, sealed.ciphertext)
        proc.seal_meta[vpn] = meta
        info = self.frame_info[frame]
        info.state = FrameState.SENSITIVE_ENCRYPTED
        info.owner, info.vpn = proc.pid, vpn
        self._write_pte(l2, idx, Pte(False))
        self._set_direct_map(frame, True, writable=True)
        return applied()

    def verify_and_decrypt(self, proc: ProcRecord, vpn: int, frame: int, l2: int, idx: int, want: Pte) -> Result:
        """SensitiveEncrypted -> SensitiveClear: open, digest-compare
        against the signature chain, hide the frame from the kernel, map."""
        meta = proc.seal_meta[vpn]
        expected = self._expected_digest(proc, vpn)
        if isinstance(expected, Result):
            return expected
        key = proc.keys[0] if meta.kind is SealKind.IMAGE else proc.seal_key
        sealed = crypto.SealedPage(
            nonce=meta.nonce, ciphertext=self.machine.phys.read_frame(frame), tag=meta.tag
        )
        self.ctx.counters.bump("open_ops")
        try:
            plaintext = crypto.open_sealed(key, sealed, proc.page_aad(vpn, meta.kind))
        except crypto.AuthFailure:
            self.ctx.violation("guardian", "integrity_failure", f"pid={proc.pid} vpn={vpn:#x} auth")
            return integrity_failure("page does not authenticate")
        self.ctx.counters.bump("digest_ops")
        if not crypto.digest_eq(crypto.digest(plaintext), expected):
            self.ctx.violation("guardian", "integrity_failure", f"pid={proc.pid} vpn={vpn:#x} digest")
            return integrity_failure("digest mismatch")
        self.machine.phys.write_frame(frame, plaintext)
        del proc.seal_meta[vpn]
        info = self.frame_info[frame]
        info.state = FrameState.SENSITIVE_CLEAR
        info.owner, info.vpn = proc.pid, vpn
        info.transient_digest = None
        info.claimants = set()
        self._set_direct_map(frame, False)
        self._write_pte(l2, idx, Pte(True, want.writable, True, frame))
        return applied()

    def _bind_transient(self, proc: ProcRecord, vpn: int, frame: int, l2: int, idx: int, want: Pte) -> Result:
        """Claim a transient frame: the owner's stored signature must match
        the digest recorded when the copy was made."""
        info = self.frame_info[frame]
        if proc.pid not in info.claimants or info.vpn != vpn:
            self.ctx.violation("guardian", "claim_rejected", f"pid={proc.pid} vpn={vpn:#x} frame={frame}")
            return rejected("no matching signature for this process")
        expected = self._slot_read(proc, vpn)
        if isinstance(expected, Result):
            return expected
        if not crypto.digest_eq(expected, info.transient_digest or b""):
            self.ctx.violation("guardian", "claim_rejected", f"pid={proc.pid} vpn={vpn:#x} digest")
            return rejected("signature mismatch for claimed page")
        info.state = FrameState.SENSITIVE_CLEAR
        info.owner, info.vpn = proc.pid, vpn
        info.transient_digest = None
        info.claimants = set()
        self._write_pte(l2, idx, Pte(True, want.writable, True, frame))
        self._drop_claims(proc.pid, vpn, keep=frame)
        return applied()

    def _drop_claims(self, pid: int, vpn: int, keep: int | None = None):
        frames = self.claims.pop((pid, vpn), [])
        for fno in frames:
            if fno == keep:
                continue
            info = self.frame_info[fno]
            if info.state is not FrameState.SENSITIVE_TRANSIENT:
                continue
            info.claimants.discard(pid)
            if not info.claimants:
                self._scrub_frame(fno)

    def _scrub_frame(self, fno: int):
        """Zero a Guardian-hidden frame and hand it back to the kernel."""
        self.machine.phys.zero_frame(fno)
        info = self.frame_info[fno]
        info.state = FrameState.NORMAL
        info.owner = info.vpn = None
        info.transient_digest = None
        info.claimants = set()
        self._set_direct_map(fno, True, writable=True)

    # -- ABI: virtual memory control -------------------------------------------

    def _vmc_trap_entry(self, fld, value):
        return self.g_vmc_trap(fld, value)

    @abi("g_vmc_trap")
    def g_vmc_trap(self, fld: VmcField, value) -> Result:
        m = self.machine
        if fld is VmcField.VM_ENABLE:
            if not value:
                self.ctx.violation("guardian", "vm_disable_rejected", "")
                return rejected("virtual memory stays enabled")
            return applied()
        if fld is VmcField.PTBR_KERNEL:
            self.ctx.violation("guardian", "kernel_ptbr_rejected", f"value={value}")
            return rejected("kernel page table switches are not allowed")
        if fld is VmcField.ITBR:
            if value == m.vmc.itbr:
                return applied()
            self.ctx.violation("guardian", "itbr_rejected", f"value={value}")
            return rejected("interrupt table selection is Guardian-owned")
        if fld is VmcField.ASID:
            value &= 0xFF
            if value >= GUARDIAN_ASID_BASE:
                self.ctx.violation("guardian", "asid_veto", f"asid={value}")
                return rejected("ASID reserved for sensitive processes")
            m.set_vm_control(VmcField.ASID, value, Mode.GUARDIAN)
            return applied(value)
        if fld is VmcField.PTBR_USER:
            proc = self.by_user_root.get(value)
            m.user_has_control = False
            if proc is not None:
                m.set_vm_control(VmcField.PTBR_USER, proc.cloak_ptbr, Mode.GUARDIAN)
                m.set_vm_control(VmcField.ASID, proc.cloak_asid, Mode.GUARDIAN)
                return applied(proc.cloak_ptbr)
            if value not in self.table_kind:
                res = self._lockdown(value, "user")
                if not res.ok:
                    self.ctx.violation("guardian", "ptbr_rejected", res.reason)
                    return res
            m.set_vm_control(VmcField.PTBR_USER, value, Mode.GUARDIAN)
            return applied(value)
        return rejected("unknown field")

    # -- ABI: interrupts and resumption -----------------------------------------

    def _active_cloak_proc(self):
        return self.by_cloak.get(self.machine.vmc.ptbr_user)

    def _active_user_proc(self):
        return self.by_user_root.get(self.machine.vmc.ptbr_user)

    @abi("g_interrupt")
    def g_interrupt(self, tf: TrapFrame):
        proc = self._active_user_proc()
        if proc is None:
            self.ctx.log("guardian", "interrupt_no_proc", f"ptbr={self.machine.vmc.ptbr_user}")
            return
        proc.saved_ctx[tf.sp] = tf.copy()
        sp = tf.sp
        proc.caps.insert(
            capsys.Capability(
                max(0, sp - STACK_CAP_SPAN), STACK_CAP_SPAN, capsys.Rw.RW, capsys.ShortLived(sp)
            )
        )
        if proc.alt_stack is not None:
            base, size = proc.alt_stack
            proc.caps.insert(capsys.Capability(base, size, capsys.Rw.RW, capsys.ShortLived(sp)))
        if tf.cause is Cause.SYSCALL:
            sid, args = tf.syscall_id, list(tf.syscall_args)
            proc.pending_syscall[sp] = (sid, args)
            spec = capsys.DEFAULT_SPECS.get(sid)
            if spec is not None:
                for cap in capsys.derive_caps(
                    spec,
                    args,
                    lambda va, n: self._user_read_priv(proc, va, n),
                    thread_sp=sp,
                    stack_base=STACK_TOP,
                ):
                    proc.caps.insert(cap)
                if spec.name == "sigaction":
                    self._snoop_sigaction(proc, args)
                elif spec.name == "sigaltstack":
                    self._snoop_sigaltstack(proc, args)
        tf.gprs = [0] * 8
        tf.pc = proc.trampoline_va
        self.machine.user_has_control = False
        self.machine.set_vm_control(VmcField.PTBR_USER, proc.cloak_ptbr, Mode.GUARDIAN)
        self.machine.set_vm_control(VmcField.ASID, proc.cloak_asid, Mode.GUARDIAN)
        self.machine.set_vm_control(VmcField.ITBR, self.normal_itbr, Mode.GUARDIAN)
        self.ctx.trace_event("g_interrupt", proc.pid, tf.cause.name)

    def _snoop_sigaction(self, proc: ProcRecord, args):
        act_va = args[1]
        raw = self._user_read_priv(proc, act_va, 4)
        if raw is not None:
            proc.signal_handlers.add(int.from_bytes(raw, "little"))

    def _snoop_sigaltstack(self, proc: ProcRecord, args):
        ss_va = args[0]
        raw = self._user_read_priv(proc, ss_va, 8)
        if raw is not None:
            base = int.from_bytes(raw[0:4], "little")
            size = int.from_bytes(raw[4:8], "little")
            if base and size:
                proc.alt_stack = (base, size)

    def _user_read_priv(self, proc: ProcRecord, va: int, n: int):
        """Guardian-privileged read through the owner's user table; None
        when any page on the way is not resident in clear text."""
        out = b""
        while n > 0:
            pte = self._walk_user(proc, va)
            if pte is None:
                return None
            info = self.frame_info[pte.frame_no]
            if info.state not in (FrameState.SENSITIVE_CLEAR, FrameState.NORMAL):
                return None
            take = min(n, PAGE_SIZE - (va & (PAGE_SIZE - 1)))
            out += self.machine.phys.read(pte.frame_no * PAGE_SIZE + (va & (PAGE_SIZE - 1)), take)
            va += take
            n -= take
        return out

    def _user_write_priv(self, proc: ProcRecord, va: int, data: bytes) -> bool:
        while data:
            pte = self._walk_user(proc, va)
            if pte is None or not pte.writable:
                return False
            info = self.frame_info[pte.frame_no]
            if info.state not in (FrameState.SENSITIVE_CLEAR, FrameState.NORMAL):
                return False
            take = min(len(data), PAGE_SIZE - (va & (PAGE_SIZE - 1)))
            self.machine.phys.write(pte.frame_no * PAGE_SIZE + (va & (PAGE_SIZE - 1)), data[:take])
            va += take
            data = data[take:]
        return True

    def _trampoline_entry(self, tf: TrapFrame):
        proc = self._active_cloak_proc()
        if proc is None:
            return None
        if page_base(tf.pc) == page_base(proc.trampoline_va):
            return self.g_proc_resume(tf)
        # Resume outside the trampoline: the process keeps the cloak table
        # and the zeroed context; it has lost its sensitivity.
        self.ctx.violation("guardian", "resume_outside_trampoline", f"pid={proc.pid} pc={tf.pc:#x}")
        return None

    @abi("g_proc_resume")
    def g_proc_resume(self, tf: TrapFrame):
        proc = self._active_cloak_proc()
        if proc is None:
            self.ctx.log("guardian", "resume_no_proc", "")
            return None
        sp = tf.sp
        ctx_frame = proc.saved_ctx.pop(sp, None)
        proc.caps.destroy_short_lived(sp)
        if ctx_frame is None:
            self.ctx.violation("guardian", "resume_without_context", f"pid={proc.pid} sp={sp:#x}")
            return None
        pending = proc.pending_syscall.pop(sp, None)
        ret = tf.gprs[0]
        if pending is not None:
            ret = self._iago_check(proc, pending, ret)
            ctx_frame.gprs[0] = ret & 0xFFFFFFFF
            self._post_syscall(proc, pending, ret, ctx_frame)
        self.machine.set_vm_control(VmcField.PTBR_USER, proc.user_ptbr, Mode.GUARDIAN)
        self.machine.set_vm_control(VmcField.ASID, proc.user_asid, Mode.GUARDIAN)
        self.machine.set_vm_control(VmcField.ITBR, self.secure_itbr, Mode.GUARDIAN)
        self.machine.user_has_control = True
        self.ctx.trace_event("g_proc_resume", proc.pid, sp)
        return ctx_frame

    def _iago_check(self, proc: ProcRecord, pending, ret: int) -> int:
        sid, args = pending
        spec = capsys.DEFAULT_SPECS.get(sid)
        name = spec.name if spec else ""
        if name == "mmap":
            length = args[1]
            if ret in (0, 0xFFFFFFFF):
                return ret
            end = ret + ((length + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1))
            bad = (
                ret % PAGE_SIZE != 0
                or end > USER_SPAN
                or any(v.status is not VmaStatus.FREED and not (end <= v.start or ret >= v.end) for v in proc.vmas)
            )
            if bad:
                self.ctx.violation("guardian", "iago_mmap", f"pid={proc.pid} ret={ret:#x}")
                return 0xFFFFFFFF
            shared = bool(args[3] & 1)  # MAP_SHARED-style flag bit
            proc.add_vma(ret, end, VmaStatus.SHARED if shared else VmaStatus.MAPPED)
            return ret
        if name == "brk":
            heap = next((v for v in proc.vmas if v.start == HEAP_VA), None)
            if heap is None:
                proc.add_vma(HEAP_VA, HEAP_VA, VmaStatus.MAPPED)
                heap = next(v for v in proc.vmas if v.start == HEAP_VA)
            if ret in (0, 0xFFFFFFFF) or ret == heap.end:
                return heap.end
            end = (ret + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1)
            bad = end > USER_SPAN or end < HEAP_VA or any(
                v is not heap and v.status is not VmaStatus.FREED and not (end <= v.start or HEAP_VA >= v.end)
                for v in proc.vmas
            )
            if bad:
                self.ctx.violation("guardian", "iago_brk", f"pid={proc.pid} ret={ret:#x}")
                return heap.end
            heap.end = end
            heap.status = VmaStatus.MAPPED
            return end
        return ret

    def _post_syscall(self, proc: ProcRecord, pending, ret: int, ctx_frame: TrapFrame):
        """The stored context of a successful clone is restored twice: the
        new thread's copy is keyed by its stack pointer and returns zero."""
        sid, args = pending
        spec = capsys.DEFAULT_SPECS.get(sid)
        if spec is None or spec.name != "clone" or ret >= 0x8000_0000:
            return
        child_stack = args[1]
        if not child_stack:
            return
        thread_ctx = ctx_frame.copy()
        thread_ctx.sp = child_stack
        thread_ctx.gprs[0] = 0
        proc.saved_ctx[child_stack] = thread_ctx

    # -- ABI: page tables ---------------------------------------------------------

    @abi("g_set_pt")
    def g_set_pt(self, table_frame: int, index: int, new_word: int) -> Result:
        meta = self.table_meta.get(table_frame)
        if meta is None or self.frame_info[table_frame].state is not FrameState.PT_PAGE:
            self.ctx.violation("guardian", "set_pt_rejected", f"frame {table_frame} is not a locked table")
            return rejected("not a locked page table")
        root, level, l1_idx = meta
        new = Pte.decode(new_word)
        if level == 1:
            return self._set_l1(root, table_frame, index, new)
        vpn = (l1_idx << 10) | index
        kind = self.table_kind.get(root)
        old_word = self.machine.phys.read_word(table_frame * PAGE_SIZE + WORD * index)
        old = Pte.decode(old_word)
        if kind == "cloak":
            return self._set_cloak_leaf(root, table_frame, index, vpn, old, new)
        if kind == "io":
            self.ctx.violation("guardian", "set_pt_rejected", "io table edits go through dma_map_check")
            return rejected("io table edits go through dma_map_check")
        proc = self.by_user_root.get(root)
        if proc is not None:
            return self._set_sensitive_leaf(proc, table_frame, index, vpn, old, new)
        return self._set_plain_leaf(kind, table_frame, index, vpn, old, new)

    def _set_l1(self, root: int, table_frame: int, index: int, new: Pte) -> Result:
        old = Pte.decode(self.machine.phys.read_word(table_frame * PAGE_SIZE + WORD * index))
        if new.present:
            if old.present:
                return rejected("L1 slot already linked")
            l2 = new.frame_no
            info = self.frame_info[l2]
            if info.state is not FrameState.NORMAL or l2 in self.table_meta:
                self.ctx.violation("guardian", "set_pt_rejected", f"bad L2 frame {l2}")
                return rejected("new table frame not lockable")
            self.table_meta[l2] = (root, 2, index)
            info.state = FrameState.PT_PAGE
            self._set_direct_map(l2, True, writable=False)
            self._scrub_new_table_leaves(l2, index, self.table_kind.get(root, "user"))
            self._write_pte(table_frame, index, Pte(True, False, False, l2), leaf=False)
            return applied()
        if old.present:
            l2 = old.frame_no
            words = self.machine.phys.read_table(l2)
            for idx, word in enumerate(words):
                pte = Pte.decode(word)
                if not pte.present:
                    continue
                if self.frame_info[pte.frame_no].sensitive:
                    return rejected("unlinking a table with live sensitive mappings")
            for idx, word in enumerate(words):
                pte = Pte.decode(word)
                if pte.present:
                    self._write_pte(l2, idx, Pte(False))
            self._write_pte(table_frame, index, Pte(False), leaf=False)
            del self.table_meta[l2]
            self.frame_info[l2].state = FrameState.NORMAL
            self._set_direct_map(l2, True, writable=True)
            return applied()
        return applied()

    def _set_cloak_leaf(self, root, l2, index, vpn, old, new) -> Result:
        proc = self.by_cloak.get(root)
        if proc is None:
            return rejected("orphan cloak table")
        if new.present:
            tramp_frame = self._tramp_frame(proc)
            if vpn != vpn_of(proc.trampoline_va) or new.frame_no != tramp_frame or new.writable:
                self.ctx.violation(
                    "guardian", "cloak_map_rejected", f"pid={proc.pid} vpn={vpn:#x} frame={new.frame_no}"
                )
                return rejected("cloak table maps only the trampoline page")
            self._write_pte(l2, index, Pte(True, False, True, new.frame_no))
            return applied()
        self._write_pte(l2, index, Pte(False))
        return applied()

    def _tramp_frame(self, proc: ProcRecord):
        pte = self._walk_user(proc, proc.trampoline_va)
        return pte.frame_no if pte else None

    def _check_plain_target(self, new: Pte) -> Result:
        info = self.frame_info[new.frame_no]
        if info.state is FrameState.GUARDIAN_OWNED:
            self.ctx.violation("guardian", "guardian_frame_map", f"frame={new.frame_no}")
            return rejected("mapping to Guardian-owned frame")
        if info.state in (FrameState.PT_PAGE, FrameState.IT_PAGE):
            self.ctx.violation("guardian", "table_frame_map", f"frame={new.frame_no}")
            return rejected("mapping a table or interrupt frame into user space")
        if info.state is FrameState.SENSITIVE_CLEAR:
            self.ctx.violation("guardian", "sensitive_map_rejected", f"frame={new.frame_no}")
            return rejected("mapping a sensitive clear frame")
        if info.state is FrameState.SENSITIVE_TRANSIENT:
            self.ctx.violation("guardian", "sensitive_map_rejected", f"frame={new.frame_no} transient")
            return rejected("mapping a transient frame without a claim")
        return applied()

    def _set_plain_leaf(self, kind, l2, index, vpn, old, new) -> Result:
        if new.present:
            res = self._check_plain_target(new)
            if not res.ok:
                return res
            info = self.frame_info[new.frame_no]
            if info.state is FrameState.SENSITIVE_ENCRYPTED:
                # Kernel repurposed a frame holding stale ciphertext.
                info.state = FrameState.NORMAL
                info.owner = info.vpn = None
        self._write_pte(l2, index, new)
        return applied()

    def _set_sensitive_leaf(self, proc, l2, index, vpn, old, new) -> Result:
        if not new.present:
            if not old.present:
                return applied()
            info = self.frame_info[old.frame_no]
            if info.state is FrameState.SENSITIVE_CLEAR:
                vma = proc.vma_at(vpn << PAGE_SHIFT)
                if vma is not None and vma.status is VmaStatus.FREED:
                    self._write_pte(l2, index, Pte(False))
                    self._scrub_frame(old.frame_no)
                    return applied()
                return self.encrypt_and_unmap(proc, vpn, old.frame_no, l2, index)
            self._write_pte(l2, index, Pte(False))
            return applied()

        if old.present and old.frame_no != new.frame_no:
            res = self._set_sensitive_leaf(proc, l2, index, vpn, old, Pte(False))
            if not res.ok:
                return res
            old = Pte(False)
        if old.present:
            # Permission change on the existing mapping.
            info = self.frame_info[old.frame_no]
            if info.state is FrameState.SENSITIVE_CLEAR or info.state is FrameState.NORMAL:
                self._write_pte(l2, index, Pte(True, new.writable, True, new.frame_no))
                return applied()
            return rejected("bad permission change")

        va = vpn << PAGE_SHIFT
        if vpn == vpn_of(proc.trampoline_va):
            tramp = self._tramp_frame(proc)
            if tramp is not None and new.frame_no != tramp:
                return rejected("trampoline must map its original frame")
            self._write_pte(l2, index, Pte(True, False, True, new.frame_no))
            return applied()

        if (proc.pid, vpn) in self.claims:
            frames = [
                f
                for f in self.claims[(proc.pid, vpn)]
                if self.frame_info[f].state is FrameState.SENSITIVE_TRANSIENT
            ]
            if new.frame_no not in frames:
                self.ctx.violation("guardian", "claim_rejected", f"pid={proc.pid} vpn={vpn:#x}")
                return rejected("pending claim requires its transient frame")
            return self._bind_transient(proc, vpn, new.frame_no, l2, index, new)

        if vpn in proc.seal_meta:
            info = self.frame_info[new.frame_no]
            # SENSITIVE_ENCRYPTED marks a frame still holding ciphertext;
            # the kernel may reuse it freely since ciphertext is public.
            if info.state not in (FrameState.NORMAL, FrameState.SENSITIVE_ENCRYPTED):
                return rejected("swap-in target frame not available")
            if info.refcount > 1:
                return rejected("swap-in target frame still mapped elsewhere")
            return self.verify_and_decrypt(proc, vpn, new.frame_no, l2, index, new)

        vma = proc.vma_at(va)
        if vma is None or vma.status is VmaStatus.FREED:
            self.ctx.violation("guardian", "map_outside_vma", f"pid={proc.pid} va={va:#x}")
            return rejected("mapping outside any live VMA")
        res = self._check_plain_target(new)
        if not res.ok:
            return res
        info = self.frame_info[new.frame_no]
        if vma.status is VmaStatus.SHARED:
            if info.state is FrameState.SENSITIVE_ENCRYPTED:
                info.state = FrameState.NORMAL
                info.owner = info.vpn = None
            self._write_pte(l2, index, Pte(True, new.writable, True, new.frame_no))
            return applied()
        # Demand-anon: Guardian zero-fills so no kernel-chosen bytes enter
        # the sensitive address space.
        if info.refcount > 1:
            return rejected("anon target frame mapped elsewhere")
        self.machine.phys.zero_frame(new.frame_no)
        info.state = FrameState.SENSITIVE_CLEAR
        info.owner, info.vpn = proc.pid, vpn
        self._set_direct_map(new.frame_no, False)
        self._write_pte(l2, index, Pte(True, new.writable, True, new.frame_no))
        return applied()

    # -- ABI: secure memory operations ---------------------------------------------

    @abi("g_free_vma")
    def g_free_vma(self, rng=None) -> Result:
        """Reclaim one VMA (start, end) or all of them: mark freed, unmap
        and zero the backing frames, clear the signature slots.  No sealing
        or digesting happens on this path."""
        proc = self._active_cloak_proc()
        if proc is None:
            return rejected("no sensitive process in scope")
        if rng is None:
            victims = [v for v in proc.vmas if v.status is not VmaStatus.FREED]
        else:
            start, end = rng
            victims = [v for v in proc.vmas if v.start == start and v.end == end]
            if not victims:
                return rejected("range does not match a whole VMA")
        freed_frames = set()
        for vma in victims:
            vma.status = VmaStatus.FREED
            for vpn in range(vpn_of(vma.start), vpn_of(vma.end)):
                slot = self._find_leaf_slot(proc.user_ptbr, vpn)
                if slot is not None:
                    l2, idx = slot
                    pte = Pte.decode(self.machine.phys.read_word(l2 * PAGE_SIZE + WORD * idx))
                    if pte.present:
                        info = self.frame_info[pte.frame_no]
                        self._write_pte(l2, idx, Pte(False))
                        freed_frames.add(pte.frame_no)
                        if info.state is FrameState.SENSITIVE_CLEAR:
                            self._scrub_frame(pte.frame_no)
                proc.seal_meta.pop(vpn, None)
                self._drop_claims(proc.pid, vpn)
                where, loc = self._slot_location(proc, vpn)
                if where == "mem":
                    self.machine.phys.write(loc, ZERO_DIGEST)
                elif where == "root":
                    proc.root_digest = None
        for index, pte in self.io_entries():
            if pte.frame_no in freed_frames:
                self.dma_unmap(index << PAGE_SHIFT)
        return applied()

    @abi("g_copy_page")
    def g_copy_page(self, src_frame: int, dst_frame: int) -> Result:
        """Copy a sensitive page between frames without cryptography.  The
        destination becomes clear text with no mapping; a later g_set_pt
        binds it to the process whose stored signature matches.  A mapped
        source is unmapped inside the call and scrubbed back to the kernel."""
        dst = self.frame_info[dst_frame]
        if dst.state not in (FrameState.NORMAL, FrameState.FREE) or dst.refcount > 1:
            self.ctx.violation("guardian", "copy_dst_rejected", f"dst={dst_frame}")
            return rejected("destination frame is already mapped")
        src = self.frame_info[src_frame]
        if src.state is FrameState.SENSITIVE_CLEAR:
            proc = self.procs.get(src.owner)
            if proc is None:
                return rejected("source owner unknown")
            vpn = src.vpn
            where, loc = self._slot_location(proc, vpn)
            if where in ("fault", "virgin"):
                return retry(loc)
            self.ctx.counters.bump("digest_ops")
            d = crypto.digest(self.machine.phys.read_frame(src_frame))
            res = self._slot_write(proc, vpn, d)
            if not res.ok:
                return res
            self._set_direct_map(dst_frame, False)
            self.machine.phys.write_frame(dst_frame, self.machine.phys.read_frame(src_frame))
            dst.state = FrameState.SENSITIVE_TRANSIENT
            dst.owner, dst.vpn = proc.pid, vpn
            dst.transient_digest = d
            dst.claimants = {proc.pid}
            self.claims.setdefault((proc.pid, vpn), []).append(dst_frame)
            slot = self._find_leaf_slot(proc.user_ptbr, vpn)
            if slot is not None:
                l2, idx = slot
                self._write_pte(l2, idx, Pte(False))
            self._scrub_frame(src_frame)
            return applied()
        if src.state is FrameState.SENSITIVE_TRANSIENT:
            self._set_direct_map(dst_frame, False)
            self.machine.phys.write_frame(dst_frame, self.machine.phys.read_frame(src_frame))
            dst.state = FrameState.SENSITIVE_TRANSIENT
            dst.owner, dst.vpn = src.owner, src.vpn
            dst.transient_digest = src.transient_digest
            dst.claimants = set(src.claimants)
            for pid in dst.claimants:
                self.claims.setdefault((pid, src.vpn), []).append(dst_frame)
            return applied()
        self.ctx.violation("guardian", "copy_src_rejected", f"src={src_frame}")
        return rejected("source is not a sensitive page")

    @abi("g_move_umem")
    def g_move_umem(self, direction: str, uaddr: int, kaddr: int, nbytes: int, sp: int) -> Result:
        """Semantic access: capability-checked direct copy between user
        pages (via the user table) and a kernel buffer, no staging."""
        proc = self._active_cloak_proc()
        if proc is None:
            return denied("no sensitive process in scope")
        if nbytes <= 0:
            return applied(b"" if direction == "to_kernel" else 0)
        if (uaddr & (PAGE_SIZE - 1)) + nbytes > PAGE_SIZE:
            return rejected("semantic chunks must stay within one user page")
        pte = self._walk_user(proc, uaddr)
        if pte is None:
            return retry(page_base(uaddr))
        info = self.frame_info[pte.frame_no]
        if info.state not in (FrameState.SENSITIVE_CLEAR, FrameState.NORMAL):
            return retry(page_base(uaddr))
        if direction == "to_user" and not pte.writable:
            return denied("user page is read-only")
        need = capsys.Need.READ if direction == "to_kernel" else capsys.Need.WRITE
        res = proc.caps.check(uaddr, nbytes, need, thread_sp=sp)
        if not res.allowed:
            self.ctx.violation(
                "guardian", "move_denied", f"pid={proc.pid} uaddr={uaddr:#x} len={nbytes} {need.value}"
            )
            return denied("no capability covers the access")
        upa = pte.frame_no * PAGE_SIZE + (uaddr & (PAGE_SIZE - 1))
        if direction == "to_kernel":
            data = self.machine.phys.read(upa, nbytes)
            if kaddr:
                kpte = self.machine.walk(self.kernel_root, kaddr)
                if kpte is None or not kpte.writable:
                    return denied("kernel buffer not writable")
                self.machine.phys.write(kpte.frame_no * PAGE_SIZE + (kaddr & (PAGE_SIZE - 1)), data)
            return applied(data)
        kpte = self.machine.walk(self.kernel_root, kaddr)
        if kpte is None:
            return denied("kernel buffer not readable")
        data = self.machine.phys.read(kpte.frame_no * PAGE_SIZE + (kaddr & (PAGE_SIZE - 1)), nbytes)
        self.machine.phys.write(upa, data)
        return applied(nbytes)

    # -- ABI: process lifecycle ------------------------------------------------------

    @abi("g_proc_create")
    def g_proc_create(self, handle: dict) -> Result:
        """Verify an adapted image and turn the prepared task into a
        sensitive process: unwrap keys, hide and decrypt present pages,
        lock the cloak table, arm the secure interrupt table."""
        image = handle["image"]
        user_root = handle["user_root"]
        cloak_root = handle["cloak_root"]
        dev_pub = handle["dev_pub"]
        try:
            _, keys = verify_and_extract(image, self.keypair, dev_pub)
        except crypto.AuthFailure as exc:
            self.ctx.violation("guardian", "proc_create_rejected", str(exc))
            return rejected(str(exc))
        meta = image.metadata
        if meta["sig_region_va"] != SIG_REGION_VA:
            return rejected("unexpected signature region placement")

        res = self._lockdown(user_root, "user")
        if not res.ok:
            return res
        res = self._lockdown(cloak_root, "cloak")
        if not res.ok:
            return res

        pid = self._next_pid
        self._next_pid += 1
        runtime_key = crypto.gen_sym_key(self.ctx.crypto_rng)
        proc = ProcRecord(
            pid=pid,
            crypto_id=pid,
            user_ptbr=user_root,
            cloak_ptbr=cloak_root,
            trampoline_va=meta["trampoline_va"],
            sig_region_va=meta["sig_region_va"],
            orig_entry=meta["orig_entry"],
            keys=[keys[0], runtime_key],
            user_asid=self._alloc_asid(),
            cloak_asid=self._alloc_asid(),
        )
        for seg in image.segments:
            start = seg.vaddr
            end = seg.vaddr + seg.pages * PAGE_SIZE
            proc.add_vma(start, end, VmaStatus.MAPPED)
            base_vpn = vpn_of(seg.vaddr)
            digests = (image.metadata["digests"] or {}).get(str(seg.vaddr))
            if digests:
                for i, hexd in enumerate(digests):
                    proc.segment_digests[base_vpn + i] = bytes.fromhex(hexd)
            for i, sp in enumerate(seg.sealed):
                proc.seal_meta[base_vpn + i] = SealMeta(SealKind.IMAGE, sp.nonce, sp.tag)
        proc.add_vma(STACK_BASE, STACK_TOP, VmaStatus.MAPPED)
        proc.add_vma(HEAP_VA, HEAP_VA, VmaStatus.MAPPED)

        # Validate cloak reach: at most the trampoline page.
        cloak_map = self._present_leaves(cloak_root)
        tramp_vpn = vpn_of(proc.trampoline_va)
        if any(v != tramp_vpn for v, _, _ in cloak_map):
            self.ctx.violation("guardian", "proc_create_rejected", "cloak maps beyond trampoline")
            return rejected("cloak table maps more than the trampoline")

        tramp_frame = None
        for vpn, fno, pte in self._present_leaves(user_root):
            if vpn == tramp_vpn:
                expected = proc.segment_digests.get(vpn)
                if expected is None or not crypto.digest_eq(
                    crypto.digest(self.machine.phys.read_frame(fno)), expected
                ):
                    return rejected("trampoline content mismatch")
                tramp_frame = fno
                continue
            if vpn not in proc.seal_meta:
                self.ctx.violation("guardian", "proc_create_rejected", f"unexpected mapping vpn={vpn:#x}")
                return rejected("unexpected present page in a fresh sensitive process")
            slot = self._find_leaf_slot(user_root, vpn)
            l2, idx = slot
            res = self.verify_and_decrypt(proc, vpn, fno, l2, idx, pte)
            if not res.ok:
                self.ctx.violation("guardian", "proc_create_rejected", res.reason)
                return rejected(res.reason)
        if tramp_frame is None:
            return rejected("trampoline page not mapped")

        self.procs[pid] = proc
        self.by_user_root[user_root] = proc
        self.by_cloak[cloak_root] = proc
        self.machine.set_vm_control(VmcField.ASID, proc.user_asid, Mode.GUARDIAN)
        self.machine.set_vm_control(VmcField.ITBR, self.secure_itbr, Mode.GUARDIAN)
        self.machine.user_has_control = True
        self.ctx.trace_event("g_proc_create", pid)
        return applied(proc)

    def _present_leaves(self, root: int):
        out = []
        words = self.machine.phys.read_table(root)
        for l1_idx, word in enumerate(words):
            if not word & 1:
                continue
            l2 = word >> PAGE_SHIFT
            leaves = self.machine.phys.read_table(l2)
            for idx, lw in enumerate(leaves):
                pte = Pte.decode(lw)
                if pte.present:
                    out.append(((l1_idx << 10) | idx, pte.frame_no, pte))
        return out

    def _alloc_asid(self) -> int:
        asid = self._next_asid
        self._next_asid += 1
        if self._next_asid > 255:
            self._next_asid = GUARDIAN_ASID_BASE
            self.machine.tlb_flush()
        return asid

    @abi("g_fork")
    def g_fork(self, child_user_root: int, child_cloak_root: int) -> Result:
        """Fork bookkeeping: push every resident parent page into the
        transient state claimable by parent and child, share keys and
        segment digests, copy seal metadata, and duplicate the saved
        context so it can be restored twice."""
        parent = self._active_cloak_proc()
        if parent is None:
            return rejected("fork outside a sensitive syscall")
        resident = []
        for vpn, fno, pte in self._present_leaves(parent.user_ptbr):
            info = self.frame_info[fno]
            if info.state is FrameState.SENSITIVE_CLEAR:
                resident.append((vpn, fno, pte))
        # Every resident page needs a reachable signature slot before any
        # state changes; otherwise delegate the fault and let the kernel
        # make the slot page resident first.
        need_resident = set()
        for vpn, _, _ in resident:
            sva = sig_slot_va(vpn)
            if sva not in (ROOT_SLOT, None):
                need_resident.add(sva)
        for sva in sorted(need_resident):
            pte = self._walk_user(parent, sva)
            if pte is None or self.frame_info[pte.frame_no].state is not FrameState.SENSITIVE_CLEAR:
                return retry(page_base(sva))

        res = self._lockdown(child_user_root, "user")
        if not res.ok:
            return res
        res = self._lockdown(child_cloak_root, "cloak")
        if not res.ok:
            return res

        pid = self._next_pid
        self._next_pid += 1
        child = ProcRecord(
            pid=pid,
            crypto_id=parent.crypto_id,
            user_ptbr=child_user_root,
            cloak_ptbr=child_cloak_root,
            trampoline_va=parent.trampoline_va,
            sig_region_va=parent.sig_region_va,
            orig_entry=parent.orig_entry,
            keys=parent.keys,
            user_asid=self._alloc_asid(),
            cloak_asid=self._alloc_asid(),
        )
        child.segment_digests = parent.segment_digests
        child.seal_meta = dict(parent.seal_meta)
        child.signal_handlers = set(parent.signal_handlers)
        child.alt_stack = parent.alt_stack
        child.vmas = [VmaRecord(v.start, v.end, v.status) for v in parent.vmas]
        for sp, ctx_frame in parent.saved_ctx.items():
            child.saved_ctx[sp] = ctx_frame.copy()

        # Child tables may map only the trampoline and shared pages.
        tramp_vpn = vpn_of(parent.trampoline_va)
        for vpn, fno, pte in self._present_leaves(child_user_root):
            if vpn == tramp_vpn:
                continue
            vma = child.vma_at(vpn << PAGE_SHIFT)
            if vma is None or vma.status is not VmaStatus.SHARED:
                return rejected("child table maps private pages before claims")

        # Deepest data pages first, then signature levels bottom-up so the
        # digests land in still-resident parents.
        def level(vpn):
            if vpn < SPAN_PAGES:
                return 0
            sva = sig_slot_va(vpn)
            return 2 if sva == ROOT_SLOT else 1

        for vpn, fno, pte in sorted(resident, key=lambda t: (level(t[0]), t[0])):
            self.ctx.counters.bump("digest_ops")
            d = crypto.digest(self.machine.phys.read_frame(fno))
            res = self._slot_write(parent, vpn, d)
            if not res.ok:
                return res  # pre-checked above; unreachable in normal runs
            info = self.frame_info[fno]
            info.state = FrameState.SENSITIVE_TRANSIENT
            info.owner = parent.pid
            info.vpn = vpn
            info.transient_digest = d
            info.claimants = {parent.pid, pid}
            self.claims.setdefault((parent.pid, vpn), []).append(fno)
            self.claims.setdefault((pid, vpn), []).append(fno)
            slot = self._find_leaf_slot(parent.user_ptbr, vpn)
            l2, idx = slot
            self._write_pte(l2, idx, Pte(False))
        child.root_digest = parent.root_digest

        self.procs[pid] = child
        self.by_user_root[child_user_root] = child
        self.by_cloak[child_cloak_root] = child
        self.ctx.trace_event("g_fork", parent.pid, pid)
        return applied(child)

    @abi("g_proc_signal")
    def g_proc_signal(self, requested_handler_pc: int, sp: int) -> Result:
        proc = self._active_cloak_proc()
        if proc is None:
            return rejected("no sensitive process in scope")
        if requested_handler_pc not in proc.signal_handlers:
            self.ctx.violation(
                "guardian", "signal_rejected", f"pid={proc.pid} pc={requested_handler_pc:#x}"
            )
            return rejected("handler was never registered")
        self.ctx.trace_event("g_proc_signal", proc.pid, requested_handler_pc)
        return applied(requested_handler_pc)

    # -- DMA ---------------------------------------------------------------------

    def dma_map_check(self, iova: int, va: int, frame: int, user_root: int) -> Result:
        """IO table updates: mappings are allowed only to pages of VMAs
        with shared status; every flavor of sensitive frame is withheld."""
        self.ctx.enter_abi("dma_map_check")
        try:
            index = vpn_of(iova)
            if index >= IO_SPAN_PAGES:
                return rejected("iova outside the IO window")
            info = self.frame_info[frame]
            if info.sensitive or info.state in (
                FrameState.PT_PAGE,
                FrameState.IT_PAGE,
                FrameState.GUARDIAN_OWNED,
            ):
                self.ctx.violation("guardian", "dma_rejected", f"frame={frame} {info.state.value}")
                return rejected("DMA to protected frames is not allowed")
            proc = self.by_user_root.get(user_root)
            if proc is not None:
                vma = proc.vma_at(va)
                if vma is None or vma.status is not VmaStatus.SHARED:
                    self.ctx.violation("guardian", "dma_rejected", f"va={va:#x} not shared")
                    return rejected("DMA is allowed only to shared VMAs")
                pte = self._walk_user(proc, va)
                if pte is None or pte.frame_no != frame:
                    self.ctx.violation("guardian", "dma_rejected", f"va={va:#x} frame mismatch")
                    return rejected("IO mapping does not match the user mapping")
            self.machine.phys.write_word(
                self.io_root * PAGE_SIZE + WORD * index, Pte(True, True, False, frame).encode()
            )
            self.frame_info[frame].refcount += 1
            return applied()
        finally:
            self.ctx.exit_abi()

    def dma_unmap(self, iova: int):
        index = vpn_of(iova)
        word = self.machine.phys.read_word(self.io_root * PAGE_SIZE + WORD * index)
        pte = Pte.decode(word)
        if pte.present:
            self.frame_info[pte.frame_no].refcount -= 1
            self.machine.phys.write_word(self.io_root * PAGE_SIZE + WORD * index, 0)

    def io_entries(self):
        words = self.machine.phys.read_table(self.io_root)
        return [(i, Pte.decode(w)) for i, w in enumerate(words) if w & 1]
