"""Shared run state: configuration, counters, the event/violation log and
the seeded RNG.  One SimContext is threaded through the machine, the
Guardian, the kernel and the harness so that every component reports into
the same deterministic record.
"""

from dataclasses import dataclass, field
import random

GUARDIAN_ABI = (
    "g_vmc_trap",
    "g_interrupt",
    "g_set_pt",
    "g_free_vma",
    "g_copy_page",
    "g_move_umem",
    "g_fork",
    "g_proc_create",
    "g_proc_resume",
    "g_proc_signal",
)

COUNTER_NAMES = GUARDIAN_ABI + (
    "dma_map_check",
    "seal_ops",
    "open_ops",
    "digest_ops",
    "traps",
    "tlb_flushes",
    "violations",
    "compress_ops",
)


@dataclass
class Config:
    frame_count: int = 16384
    tlb_entries: int = 64
    secure_abi: bool = True       # when False the kernel migrates via seal/open
    paranoid: bool = False        # sweep after every Guardian ABI call
    guardian_seed: int = 0        # key material seed; 0 means derive from run seed


@dataclass
class Event:
    step: int
    actor: str
    kind: str
    detail: str

    def fmt(self) -> str:
        return f"[{self.step}] {self.actor} {self.kind}: {self.detail}"


class Counters(dict):
    """Exact operation counters; names are part of the report contract."""

    def __init__(self):
        super().__init__((name, 0) for name in COUNTER_NAMES)

    def bump(self, name, n=1):
        self[name] = self.get(name, 0) + n


class SimContext:
    """Deterministic per-run state shared by all components."""

    def __init__(self, seed: int = 0, config: Config | None = None):
        self.seed = seed
        self.config = config or Config()
        self.rng = random.Random(seed ^ 0x5EED)
        # Key material draws from a separate stream so sensitive and plain
        # runs of one scenario see identical scheduling randomness.
        self.crypto_rng = random.Random((seed << 1) ^ 0xC0FFEE ^ (self.config.guardian_seed * 2654435761))
        self.counters = Counters()
        self.events: list[Event] = []
        self.trace: list[tuple] = []
        self.tracing = False
        self.step = 0
        # Set by the harness; invoked after every outermost Guardian ABI call.
        self.after_guardian_call = None
        self._abi_depth = 0

    def log(self, actor: str, kind: str, detail: str = ""):
        self.events.append(Event(self.step, actor, kind, detail))

    def violation(self, actor: str, kind: str, detail: str = ""):
        self.counters.bump("violations")
        self.log(actor, "violation:" + kind, detail)

    def trace_event(self, *fields):
        if self.tracing:
            self.trace.append((self.step,) + fields)

    def enter_abi(self, name: str):
        self.counters.bump(name)
        self.counters.bump("traps")
        self._abi_depth += 1

    def exit_abi(self):
        self._abi_depth -= 1
        if self._abi_depth == 0 and self.after_guardian_call is not None:
            self.after_guardian_call()

    def violations(self) -> int:
        return self.counters["violations"]
