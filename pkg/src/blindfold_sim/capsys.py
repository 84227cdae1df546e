"""Lightweight capability system regulating semantic kernel access.

A capability is a 4-tuple (addr, size, rw, life).  Short-lived grants are
tied to the issuing thread's stack pointer and die when its system call
returns; long-lived grants (clone/set_tid_address/set_robust_list) live
until the thread exits and are disposable: consumed by their first use.

The store keeps short-lived capabilities in a list sorted by start address
with prefix max-end summaries, so a check is one binary search plus a
bounded forward extension; the handful of long-lived capabilities per
process is scanned directly.  Checks use union coverage: a query passes if
the live capabilities that permit the access jointly cover every byte.
"""

from dataclasses import dataclass, field
import enum


class Rw(enum.Enum):
    RO = "ro"
    RW = "rw"


class Need(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class ShortLived:
    thread_sp: int


@dataclass(frozen=True)
class LongLived:
    stack_base: int
    disposable: bool = True


@dataclass(frozen=True)
class Capability:
    addr: int
    size: int
    rw: Rw
    life: ShortLived | LongLived

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("capability size must be positive")
        if self.addr + self.size > 1 << 32:
            raise ValueError("capability range wraps the address space")

    @property
    def end(self) -> int:
        return self.addr + self.size

    def permits(self, need: Need) -> bool:
        return self.rw is Rw.RW or need is Need.READ


@dataclass
class CheckResult:
    allowed: bool
    consumed: list = field(default_factory=list)
    probes: int = 0


def linear_covers(caps, addr: int, length: int, need: Need) -> bool:
    """Reference semantics: brute-force union coverage over any iterable of
    capabilities.  Used as the oracle the sorted store is checked against."""
    spans = sorted((c.addr, c.end) for c in caps if c.permits(need))
    cur = addr
    end = addr + length
    for start, stop in spans:
        if start > cur:
            break
        if stop > cur:
            cur = stop
        if cur >= end:
            return True
    return cur >= end


class CapStore:
    """Per-process capability store.  Concurrent-read/exclusive-write
    discipline; the simulator serializes all calls."""

    def __init__(self):
        self._short: list[Capability] = []   # sorted by addr
        self._starts: list[int] = []
        self._pmax_read: list[int] = []      # prefix max end, caps permitting reads
        self._pmax_write: list[int] = []     # prefix max end, RW caps only
        self._long: list[Capability] = []

    def __len__(self):
        return len(self._short) + len(self._long)

    def all_caps(self) -> list[Capability]:
        return list(self._short) + list(self._long)

    def _rebuild(self):
        self._starts = [c.addr for c in self._short]
        pr, pw = [], []
        mr = mw = 0
        for c in self._short:
            mr = max(mr, c.end)
            if c.rw is Rw.RW:
                mw = max(mw, c.end)
            pr.append(mr)
            pw.append(mw)
        self._pmax_read = pr
        self._pmax_write = pw

    def insert(self, cap: Capability):
        if isinstance(cap.life, LongLived):
            self._long.append(cap)
            return
        lo, hi = 0, len(self._short)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._short[mid].addr <= cap.addr:
                lo = mid + 1
            else:
                hi = mid
        self._short.insert(lo, cap)
        self._rebuild()

    def remove(self, cap: Capability):
        try:
            self._short.remove(cap)
            self._rebuild()
        except ValueError:
            self._long.remove(cap)

    def destroy_short_lived(self, thread_sp: int) -> int:
        before = len(self._short)
        self._short = [
            c for c in self._short
            if not (isinstance(c.life, ShortLived) and c.life.thread_sp == thread_sp)
        ]
        self._rebuild()
        return before - len(self._short)

    def destroy_long_lived(self, stack_base: int) -> int:
        before = len(self._long)
        self._long = [
            c for c in self._long
            if not (isinstance(c.life, LongLived) and c.life.stack_base == stack_base)
        ]
        return before - len(self._long)

    def check(self, addr: int, length: int, need: Need, thread_sp: int = 0) -> CheckResult:
        """Union-coverage check.  Probes count sorted-list bisection steps,
        forward extensions past the initial position, and long-lived
        inspections; the bound is ceil(log2 n) + a small constant."""
        if length <= 0:
            raise ValueError("check length must be positive")
        probes = 0
        end = addr + length

        longs = []
        for c in self._long:
            probes += 1
            if c.permits(need) and c.addr < end and c.end > addr:
                longs.append(c)

        pmax = self._pmax_write if need is Need.WRITE else self._pmax_read
        starts = self._starts
        n = len(starts)
        lo, hi = 0, n
        while lo < hi:
            probes += 1
            mid = (lo + hi) // 2
            if starts[mid] <= addr:
                lo = mid + 1
            else:
                hi = mid
        idx = lo - 1  # rightmost cap with start <= addr

        cur = addr
        while cur < end:
            best = pmax[idx] if idx >= 0 else 0
            for c in longs:
                if c.addr <= cur:
                    best = max(best, c.end)
            if best <= cur:
                return CheckResult(False, probes=probes)
            cur = best
            while idx + 1 < n and starts[idx + 1] <= cur:
                idx += 1
                probes += 1

        # Disposable long-lived grants are burned by the access that used them.
        consumed = [c for c in longs if isinstance(c.life, LongLived) and c.life.disposable]
        for c in consumed:
            self._long.remove(c)
        return CheckResult(True, consumed=consumed, probes=probes)


# -- syscall-driven capability derivation -----------------------------------


class RuleKind(enum.Enum):
    REGION = "region"   # arg is a pointer to a region
    IOV = "iov"         # arg points to an array of (base, len) pairs
    PPTR = "pptr"       # arg -> pointer -> region (three levels)


@dataclass(frozen=True)
class ArgRule:
    kind: RuleKind
    arg: int                  # 1-based argument index holding the address
    rw: Rw
    fixed_len: int | None = None
    len_arg: int | None = None
    count_arg: int | None = None


@dataclass(frozen=True)
class SyscallSpec:
    name: str
    syscall_id: int
    rules: tuple
    long_lived: bool = False


IOV_ENTRY = 8  # u32 base, u32 len


def parse_spec_table(text: str) -> dict[int, SyscallSpec]:
    """Parse the declarative capability table: one rule per line,
    `name id rule[,rule...] life`, '#' comments."""
    specs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"spec table line {lineno}: expected 4 fields, got {len(parts)}")
        name, id_s, rules_s, life_s = parts
        if life_s not in ("short", "long"):
            raise ValueError(f"spec table line {lineno}: bad lifetime {life_s!r}")
        rules = []
        if rules_s != "-":
            for chunk in rules_s.split(","):
                rules.append(_parse_rule(chunk, lineno))
        specs[int(id_s)] = SyscallSpec(
            name=name,
            syscall_id=int(id_s),
            rules=tuple(rules),
            long_lived=(life_s == "long"),
        )
    return specs


def _parse_rule(chunk: str, lineno: int) -> ArgRule:
    fields = chunk.split(":")
    if len(fields) != 4 or not fields[0].startswith("a"):
        raise ValueError(f"spec table line {lineno}: bad rule {chunk!r}")
    arg = int(fields[0][1:])
    kind = RuleKind(fields[1])
    rw = Rw(fields[2])
    key, _, val = fields[3].partition("=")
    if kind is RuleKind.IOV:
        if key != "count":
            raise ValueError(f"spec table line {lineno}: iov rules need count=")
        return ArgRule(kind, arg, rw, count_arg=int(val[1:]))
    if key != "len":
        raise ValueError(f"spec table line {lineno}: {kind.value} rules need len=")
    if val.startswith("a"):
        return ArgRule(kind, arg, rw, len_arg=int(val[1:]))
    return ArgRule(kind, arg, rw, fixed_len=int(val))


DEFAULT_SPEC_TABLE = """\
# name            id  rules                                life
read               0  a2:region:rw:len=a3                  short
write              1  a2:region:ro:len=a3                  short
open               2  a1:region:ro:len=64                  short
close              3  -                                    short
mmap               4  -                                    short
munmap             5  -                                    short
brk                6  -                                    short
clone              7  a4:region:rw:len=8                   long
fork               8  -                                    short
exit               9  -                                    short
sigaction         10  a2:region:ro:len=16,a3:region:rw:len=16  short
sigaltstack       11  a1:region:ro:len=16                  short
set_tid_address   12  a1:region:rw:len=8                   long
set_robust_list   13  a1:region:ro:len=8                   long
migrate_pages     14  -                                    short
futex             15  a1:region:ro:len=4                   short
writev            16  a1:iov:ro:count=a2                   short
readv             17  a1:iov:rw:count=a2                   short
"""

DEFAULT_SPECS = parse_spec_table(DEFAULT_SPEC_TABLE)
SYSCALL_IDS = {s.name: i for i, s in DEFAULT_SPECS.items()}


def derive_caps(spec: SyscallSpec, args, user_read, thread_sp: int, stack_base: int):
    """Turn a trapped system call into capabilities.

    user_read(va, n) performs a Guardian-privileged read through the
    owner's user page table and returns None when the target page is
    unreadable, in which case that derivation arm is skipped (a later
    access will surface as a denial)."""
    life = LongLived(stack_base=stack_base) if spec.long_lived else ShortLived(thread_sp=thread_sp)
    caps = []
    for rule in spec.rules:
        addr = args[rule.arg - 1] if rule.arg - 1 < len(args) else 0
        if addr == 0:
            continue
        if rule.kind is RuleKind.REGION:
            length = rule.fixed_len if rule.fixed_len is not None else args[rule.len_arg - 1]
            if length > 0:
                caps.append(Capability(addr, length, rule.rw, life))
        elif rule.kind is RuleKind.IOV:
            count = args[rule.count_arg - 1]
            array_len = count * IOV_ENTRY
            if array_len <= 0:
                continue
            caps.append(Capability(addr, array_len, Rw.RO, life))
            for i in range(count):
                entry = user_read(addr + i * IOV_ENTRY, IOV_ENTRY)
                if entry is None:
                    continue
                base = int.from_bytes(entry[0:4], "little")
                length = int.from_bytes(entry[4:8], "little")
                if base and length:
                    caps.append(Capability(base, length, rule.rw, life))
        elif rule.kind is RuleKind.PPTR:
            caps.append(Capability(addr, 4, Rw.RO, life))
            inner = user_read(addr, 4)
            if inner is None:
                continue
            ptr = int.from_bytes(inner, "little")
            length = rule.fixed_len if rule.fixed_len is not None else args[rule.len_arg - 1]
            if ptr and length > 0:
                caps.append(Capability(ptr, 4, Rw.RO, life))
                target = user_read(ptr, 4)
                if target is None:
                    continue
                final = int.from_bytes(target, "little")
                if final:
                    caps.append(Capability(final, length, rule.rw, life))
    return caps
