"""Scenario ingestion, deterministic execution, attack injection, the
confidentiality sweep oracle, and report generation.

Scenario files are flat and line-oriented: one directive per line, '#'
comments, and an optional `repeat N` prefix.  A Report is a pure function
of (scenario bytes, seed): rerunning with the same inputs produces a
byte-identical serialization.
"""

from dataclasses import dataclass, field
import hashlib
import random
import shlex

from . import binadapt, crypto
from .guardian import FrameState, Guardian, Status, VmaStatus
from .layout import KERNEL_BASE, PAGE_SHIFT, PAGE_SIZE, page_base, vpn_of
from .oskernel import Kernel, Task
from .runtime import Config, SimContext
from .simhw import Access, Cause, Fault, Machine, Mode, VmcField

ATTACK_KINDS = (
    "replay",
    "rop_resume",
    "iago_mmap",
    "direct_read",
    "pt_write",
    "dma_probe",
    "asid_alias",
)


class ScenarioError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Step:
    lineno: int
    repeat: int
    words: tuple

    def fmt(self) -> str:
        prefix = f"repeat {self.repeat} " if self.repeat != 1 else ""
        return prefix + " ".join(self.words)


@dataclass
class Scenario:
    steps: list
    config: dict = field(default_factory=dict)

    def pretty(self) -> str:
        lines = [f"config {k} {v}" for k, v in self.config.items()]
        lines += [s.fmt() for s in self.steps]
        return "\n".join(lines) + "\n"


_CONFIG_KEYS = {"frames", "secure_abi", "guardian_seed", "tlb_entries"}

_STEP_ARITY = {
    "spawn": (3, 3),
    "write": (3, 3),
    "read": (3, 3),
    "poke": (3, 3),
    "syscall": (2, 9),
    "plant_canary": (2, 2),
    "mark": (1, 1),
    "kernel": (1, 8),
    "attack": (2, 3),
    "assert": (1, 5),
}


def parse_scenario(text: str) -> Scenario:
    """Structural validation with line-accurate errors."""
    steps = []
    config = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            words = shlex.split(line, posix=False)
        except ValueError as exc:
            raise ScenarioError(lineno, f"bad quoting: {exc}")
        repeat = 1
        if words[0] == "repeat":
            if len(words) < 3 or not words[1].isdigit():
                raise ScenarioError(lineno, "repeat needs a count and a directive")
            repeat = int(words[1])
            words = words[2:]
        verb = words[0]
        if verb == "config":
            if len(words) != 3:
                raise ScenarioError(lineno, "config takes a key and a value")
            if words[1] not in _CONFIG_KEYS:
                raise ScenarioError(lineno, f"unknown config key {words[1]!r}")
            config[words[1]] = words[2]
            continue
        if verb not in _STEP_ARITY:
            raise ScenarioError(lineno, f"unknown directive {verb!r}")
        lo, hi = _STEP_ARITY[verb]
        if not lo <= len(words) - 1 <= hi:
            raise ScenarioError(lineno, f"{verb} takes {lo}..{hi} arguments")
        if verb == "spawn" and words[3] not in ("sensitive", "plain"):
            raise ScenarioError(lineno, "spawn mode must be sensitive or plain")
        if verb == "attack" and words[1] not in ATTACK_KINDS:
            raise ScenarioError(lineno, f"unknown attack kind {words[1]!r}")
        steps.append(Step(lineno, repeat, tuple(words)))
    return Scenario(steps, config)


def _parse_value(tok: str) -> bytes:
    if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
        body = tok[1:-1]
        return body.replace("\\0", "\0").replace("\\n", "\n").encode("latin1")
    if tok.startswith("hex:"):
        return bytes.fromhex(tok[4:])
    raise ValueError(f"expected a quoted string or hex:... value, got {tok!r}")


def _parse_int(tok: str) -> int:
    return int(tok, 0)


@dataclass
class AttackOutcome:
    kind: str
    target: str
    detected: bool
    contained: bool
    note: str


class Report:
    def __init__(self):
        self.seed = 0
        self.scenario_digest = ""
        self.counters = {}
        self.asserts = []        # (lineno, text, ok, detail)
        self.attacks = []        # AttackOutcome
        self.outputs = {}        # task name -> [str]
        self.sweep_findings = []
        self.aborted = ""
        self.misc = {}

    @property
    def ok(self) -> bool:
        return (
            not self.aborted
            and all(a[2] for a in self.asserts)
            and all(a.detected and a.contained for a in self.attacks)
            and not self.sweep_findings
        )

    def to_kv(self) -> str:
        lines = [
            f"seed={self.seed}",
            f"scenario={self.scenario_digest}",
            f"ok={int(self.ok)}",
            f"aborted={self.aborted}",
        ]
        for name in sorted(self.counters):
            lines.append(f"counters.{name}={self.counters[name]}")
        for i, (lineno, text, ok, detail) in enumerate(self.asserts):
            lines.append(f"asserts.{i}={int(ok)}|line {lineno}|{text}|{detail}")
        for i, a in enumerate(self.attacks):
            lines.append(
                f"attacks.{i}={a.kind}|{a.target}|detected={int(a.detected)}|contained={int(a.contained)}|{a.note}"
            )
        for name in sorted(self.outputs):
            for i, out in enumerate(self.outputs[name]):
                lines.append(f"outputs.{name}.{i}={out}")
        lines.append(f"sweep_findings={len(self.sweep_findings)}")
        for i, f in enumerate(self.sweep_findings):
            lines.append(f"sweep.{i}={f}")
        for k in sorted(self.misc):
            lines.append(f"misc.{k}={self.misc[k]}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [f"run seed={self.seed} scenario={self.scenario_digest} -> {'PASS' if self.ok else 'FAIL'}"]
        out.append("counters:")
        for name in sorted(self.counters):
            if self.counters[name]:
                out.append(f"  {name:18s} {self.counters[name]}")
        if self.asserts:
            out.append("asserts:")
            for lineno, text, ok, detail in self.asserts:
                mark = "pass" if ok else "FAIL"
                suffix = f" ({detail})" if detail and not ok else ""
                out.append(f"  [{mark}] line {lineno}: {text}{suffix}")
        if self.attacks:
            out.append("attacks:")
            for a in self.attacks:
                state = "contained" if a.detected and a.contained else "NOT CONTAINED"
                out.append(f"  {a.kind} on {a.target}: {state} ({a.note})")
        if self.sweep_findings:
            out.append("sweep findings:")
            for f in self.sweep_findings:
                out.append(f"  {f}")
        if self.aborted:
            out.append(f"aborted: {self.aborted}")
        return "\n".join(out) + "\n"


# -- the simulation driver ----------------------------------------------------


class Simulation:
    """One booted machine + Guardian + kernel, driven by scenario steps."""

    def __init__(self, seed: int, config: Config):
        self.ctx = SimContext(seed, config)
        self.machine = Machine(self.ctx)
        gkey = crypto.gen_keypair(self.ctx.crypto_rng)
        self.guardian = Guardian(self.machine, self.ctx, gkey)
        first_free = self.guardian.secure_boot()
        self.kernel = Kernel(self.machine, self.guardian, self.ctx, first_free)
        self.machine.kernel_handler = self.kernel.handle_event
        self.dev_key = crypto.gen_keypair(self.ctx.crypto_rng)
        self.tasks: dict[str, Task] = {}
        self.canaries: list = []        # (task name, va, bytes)
        self.marks: dict[str, dict] = {}
        self.attacks: list[AttackOutcome] = []
        self._adapted_cache: dict[str, binadapt.ProgramImage] = {}
        if config.paranoid:
            self.ctx.after_guardian_call = self._paranoid_sweep
        self._sweep_log: list = []

    def _paranoid_sweep(self):
        found = sweep_confidentiality(self)
        if found:
            self._sweep_log.extend(found)

    # task helpers

    def task(self, name: str) -> Task:
        t = self.tasks.get(name)
        if t is None or not t.alive:
            raise RuntimeError(f"task {name!r} is not running")
        return t

    def adapted_image(self, image_name: str) -> binadapt.ProgramImage:
        img = self._adapted_cache.get(image_name)
        if img is None:
            raw = binadapt.build_demo_image(image_name)
            img = binadapt.adapt(raw, self.dev_key, self.guardian.keypair.public(), self.ctx.crypto_rng)
            self._adapted_cache[image_name] = img
        return img

    def spawn(self, name: str, image_name: str, sensitive: bool):
        if sensitive:
            image = self.adapted_image(image_name)
        else:
            image = binadapt.build_demo_image(image_name)
        task = self.kernel.exec_create_process(
            image, sensitive, name, dev_pub=self.dev_key.public()
        )
        if task is None:
            raise RuntimeError(f"spawn of {name!r} rejected")
        self.tasks[name] = task
        return task


def sweep_confidentiality(sim: Simulation) -> list[str]:
    """Exhaustive reachability oracle over architectural state: walks every
    page table, the IO table and the TLB, flags any path by which the
    kernel, a device or a foreign process could reach sensitive clear text,
    and recounts every frame's mappings against Guardian bookkeeping."""
    g, m, k = sim.guardian, sim.machine, sim.kernel
    findings = []
    recount = [0] * m.phys.frame_count

    # Only locked tables are architecturally loadable: the Guardian locks
    # any root at first activation, so a raw kernel-built frame that was
    # never locked is still plain data, not a page table.
    tables = {}
    for root, kind in g.table_kind.items():
        if kind == "io":
            continue
        owner = g.by_user_root.get(root) or g.by_cloak.get(root)
        tables[root] = (kind, owner)

    for root, (kind, proc) in tables.items():
        words = m.phys.read_table(root)
        for l1_idx, w in enumerate(words):
            if not w & 1:
                continue
            l2 = w >> PAGE_SHIFT
            leaves = m.phys.read_table(l2)
            for idx, lw in enumerate(leaves):
                if not lw & 1:
                    continue
                fno = lw >> PAGE_SHIFT
                writable = bool(lw & 2)
                recount[fno] += 1
                info = g.frame_info[fno]
                vpn = (l1_idx << 10) | idx
                if info.state is FrameState.SENSITIVE_CLEAR:
                    legal = (
                        kind == "user"
                        and proc is not None
                        and proc.pid == info.owner
                        and vpn == info.vpn
                    )
                    if not legal:
                        findings.append(
                            f"sensitive clear frame {fno} reachable via {kind} table {root} vpn {vpn:#x}"
                        )
                elif info.state is FrameState.SENSITIVE_TRANSIENT:
                    findings.append(f"transient frame {fno} mapped via {kind} table {root}")
                elif info.state is FrameState.GUARDIAN_OWNED:
                    findings.append(f"guardian frame {fno} mapped via {kind} table {root}")
                elif info.state in (FrameState.PT_PAGE, FrameState.IT_PAGE) and writable:
                    findings.append(f"writable mapping to table frame {fno} via {kind} table {root}")

    io_words = m.phys.read_table(g.io_root)
    for idx, w in enumerate(io_words):
        if not w & 1:
            continue
        fno = w >> PAGE_SHIFT
        recount[fno] += 1
        info = g.frame_info[fno]
        if info.sensitive or info.state in (FrameState.PT_PAGE, FrameState.IT_PAGE, FrameState.GUARDIAN_OWNED):
            findings.append(f"IO table maps protected frame {fno} ({info.state.value})")

    for entry in m.tlb.entries():
        info = g.frame_info[entry.pte.frame_no]
        if info.state is FrameState.SENSITIVE_CLEAR:
            proc = g.procs.get(info.owner)
            if proc is None or entry.asid != proc.user_asid:
                findings.append(
                    f"stale TLB entry asid={entry.asid} vpn={entry.vpn:#x} maps sensitive frame {entry.pte.frame_no}"
                )
        elif info.state is FrameState.SENSITIVE_TRANSIENT:
            findings.append(f"TLB entry maps transient frame {entry.pte.frame_no}")

    active = m.vmc.ptbr_user
    proc = g.by_user_root.get(active)
    if proc is not None and not m.user_has_control:
        findings.append(f"kernel holds a sensitive user table (root {active}) without the owner running")

    for fno, info in enumerate(g.frame_info):
        if info.refcount != recount[fno]:
            findings.append(
                f"refcount drift frame {fno}: guardian={info.refcount} recount={recount[fno]} ({info.state.value})"
            )
        if info.state is FrameState.SENSITIVE_CLEAR and recount[fno] != 1:
            findings.append(f"sensitive clear frame {fno} has {recount[fno]} mappings")
        if info.state is FrameState.SENSITIVE_TRANSIENT and recount[fno] != 0:
            findings.append(f"transient frame {fno} has {recount[fno]} mappings")
    return findings


def scan_kernel_for_canaries(sim: Simulation) -> list[str]:
    """Probabilistic plaintext-leak oracle: search every kernel-readable
    byte region (direct-mapped frames, swap slots, device buffers) for any
    planted 32-byte canary window, shared VMAs excluded."""
    if not sim.canaries:
        return []
    g, m, k = sim.guardian, sim.machine, sim.kernel
    needles = [c[2] for c in sim.canaries]
    findings = []

    shared_frames = set()
    for t in k.tasks.values():
        for vma in t.vmas:
            if vma.shared:
                for vpn in range(vpn_of(vma.start), vpn_of(vma.end)):
                    fno = t.pages.get(vpn)
                    if fno is not None:
                        shared_frames.add(fno)

    kwords = m.phys.read_table(g.kernel_root)
    for l1_idx, w in enumerate(kwords):
        if not w & 1:
            continue
        leaves = m.phys.read_table(w >> PAGE_SHIFT)
        for idx, lw in enumerate(leaves):
            if not lw & 1:
                continue
            fno = lw >> PAGE_SHIFT
            if fno in shared_frames or m.phys.frames[fno] is None:
                continue
            blob = bytes(m.phys.frames[fno])
            for i, needle in enumerate(needles):
                if needle in blob:
                    findings.append(f"canary {i} visible in kernel-mapped frame {fno}")
    for slot in k.swap.values():
        for i, needle in enumerate(needles):
            if needle in slot.data:
                findings.append(f"canary {i} visible in swap slot {slot.slot_id}")
    for dev in k.devices.values():
        blob = bytes(dev.buffer)
        for i, needle in enumerate(needles):
            if needle in blob:
                findings.append(f"canary {i} visible in device {dev.name} buffer")
    return findings


def contains_canary(sim: Simulation, blob: bytes) -> bool:
    return any(c[2] in blob for c in sim.canaries if blob)


# -- attack injection -----------------------------------------------------------


def inject_attack(sim: Simulation, kind: str, target: str, arg: str | None = None) -> AttackOutcome:
    fn = _ATTACKS[kind]
    outcome = fn(sim, target, arg)
    sim.attacks.append(outcome)
    sim.ctx.log("harness", "attack", f"{kind} on {target}: detected={outcome.detected}")
    return outcome


def _attack_replay(sim, target, arg):
    k = sim.kernel
    task = sim.task(target)
    va = _parse_int(arg) if arg else next(iter(sorted(task.pages)), 0) << PAGE_SHIFT
    vpn = vpn_of(va)
    if vpn not in task.pages and not k.swap_in(task, vpn):
        return AttackOutcome("replay", target, False, True, "page unavailable")
    k.swap_out(task, vpn)
    old_slot = task.swapped[vpn]
    old_bytes = k.swap[old_slot].data
    k.swap_in(task, vpn)
    k.swap_out(task, vpn)
    new_slot = task.swapped[vpn]
    fresh = k.swap[new_slot].data
    k.swap[new_slot] = k.swap[new_slot].__class__(
        new_slot, old_bytes, (task.tid, vpn), True, False
    )
    replay_ok = k.swap_in(task, vpn)
    leaked = contains_canary(sim, old_bytes)
    detected = not replay_ok
    # restore the honest ciphertext so the scenario can continue
    if not replay_ok:
        k.swap[new_slot] = k.swap[new_slot].__class__(new_slot, fresh, (task.tid, vpn), True, False)
        k.swap_in(task, vpn)
    return AttackOutcome("replay", target, detected, not leaked, "stale ciphertext rejected" if detected else "replay accepted")


def _attack_rop_resume(sim, target, arg):
    k, m = sim.kernel, sim.machine
    task = sim.task(target)
    k.ensure_user(task)
    k.park_current()  # the Guardian holds the real context now
    evil = task.ktf.copy()
    evil.pc = _parse_int(arg) if arg else 0x0040_0000  # skip the trampoline
    frame = m.return_to_user(evil)
    hijacked = frame is not None and frame.pc == evil.pc and any(frame.gprs)
    # The zombie runs with the cloak table and a zeroed context: its next
    # touch of sensitive memory faults.
    leaked = b""
    faulted = False
    try:
        leaked = m.mem_read(0x0060_0000, 32, Mode.USER)
    except Fault:
        faulted = True
    k.ensure_user(task)  # legitimate resume path restores the saved context
    detected = faulted and not hijacked
    return AttackOutcome(
        "rop_resume", target, detected, not contains_canary(sim, bytes(leaked)),
        "zeroed context, sensitive access faulted" if detected else "hijack ran with live context",
    )


def _attack_iago_mmap(sim, target, arg):
    k = sim.kernel
    task = sim.task(target)
    k.ensure_user(task)
    real = k._sys_mmap

    def evil_mmap(t, args):
        real(t, args)
        return 0x00FF_8000  # inside the stack VMA

    k._sys_mmap = evil_mmap
    try:
        ret = k.do_syscall(task, "mmap", [0, PAGE_SIZE, 3, 0, 0, 0])
    finally:
        k._sys_mmap = real
    detected = ret == 0xFFFFFFFF
    return AttackOutcome(
        "iago_mmap", target, detected, True,
        "return value rewritten to failure" if detected else f"process accepted {ret:#x}",
    )


def _attack_direct_read(sim, target, arg):
    k, m = sim.kernel, sim.machine
    task = sim.task(target)
    va = _parse_int(arg) if arg else 0x0060_0000
    k.ensure_user(task)
    k.park_current()  # kernel has control; the cloak table stays loaded
    grabbed = b""
    fault_user = fault_direct = False
    try:
        grabbed = m.mem_read(va, 32, Mode.KERNEL)
    except Fault:
        fault_user = True
    fno = task.pages.get(vpn_of(va))
    if fno is not None:
        try:
            grabbed += k.kread(fno * PAGE_SIZE, 32)
        except Fault:
            fault_direct = True
    k.ensure_user(task)
    detected = fault_user and (fno is None or fault_direct)
    return AttackOutcome(
        "direct_read", target, detected, not contains_canary(sim, bytes(grabbed)),
        "user and direct-map reads both faulted" if detected else "kernel read sensitive bytes",
    )


def _attack_pt_write(sim, target, arg):
    k, m = sim.kernel, sim.machine
    task = sim.task(target)
    root = task.user_root
    try:
        k.kwrite(root * PAGE_SIZE, (0xDEAD000 | 1).to_bytes(4, "little"))
        return AttackOutcome("pt_write", target, False, True, "kernel stored to a page table")
    except Fault:
        return AttackOutcome("pt_write", target, True, True, "permission fault on locked table frame")


def _attack_dma_probe(sim, target, arg):
    k = sim.kernel
    task = sim.task(target)
    va = _parse_int(arg) if arg else 0x0060_0000
    fno = task.pages.get(vpn_of(va))
    if fno is None:
        return AttackOutcome("dma_probe", target, False, True, "page not resident")
    res = k.guardian.dma_map_check(0x0000_3000, va, fno, task.user_root)
    data = k.dma_read("prober", 0x0000_3000, 32)
    detected = (not res.ok) and data is None
    return AttackOutcome(
        "dma_probe", target, detected, not contains_canary(sim, bytes(data or b"")),
        "IO mapping rejected" if detected else "device read sensitive frame",
    )


def _attack_asid_alias(sim, target, arg):
    k, m = sim.kernel, sim.machine
    victim = sim.task(target)
    other = sim.task(arg) if arg else next(
        t for t in sim.tasks.values() if t.alive and t is not victim
    )
    k.ensure_user(victim)   # fill the TLB with the victim's translations
    k.user_read(victim, 0x0060_0000, 8)
    proc = k.guardian.by_user_root[victim.user_root]
    k.ensure_user(other)
    res = m.set_vm_control(VmcField.ASID, proc.user_asid, Mode.KERNEL)
    rejected = getattr(res, "status", None) is Status.REJECTED
    grabbed = b""
    try:
        grabbed = m.mem_read(0x0060_0000, 32, Mode.KERNEL)
    except Fault:
        pass
    # The veto must leave no sensitive translation reachable at the
    # ASID the kernel is actually running with.
    stale = [
        e for e in m.tlb.entries()
        if e.asid == m.vmc.asid and sim.guardian.frame_info[e.pte.frame_no].state is FrameState.SENSITIVE_CLEAR
    ]
    detected = rejected and not stale
    return AttackOutcome(
        "asid_alias", target, detected, not contains_canary(sim, bytes(grabbed)),
        "ASID reuse vetoed, no stale sensitive translation" if detected else "alias reached sensitive TLB entries",
    )


_ATTACKS = {
    "replay": _attack_replay,
    "rop_resume": _attack_rop_resume,
    "iago_mmap": _attack_iago_mmap,
    "direct_read": _attack_direct_read,
    "pt_write": _attack_pt_write,
    "dma_probe": _attack_dma_probe,
    "asid_alias": _attack_asid_alias,
}


# -- step execution ---------------------------------------------------------------


def _exec_step(sim: Simulation, step: Step, report: Report):
    k = sim.kernel
    w = step.words
    verb = w[0]
    if verb == "spawn":
        sim.spawn(w[1], w[2], w[3] == "sensitive")
    elif verb == "write":
        task = sim.task(w[1])
        ok = k.user_write(task, _parse_int(w[2]), _parse_value(w[3]))
        if not ok:
            task.outputs.append(("write_fault", w[2]))
    elif verb == "poke":
        task = sim.task(w[1])
        k.user_write(task, _parse_int(w[2]), bytes.fromhex(w[3]))
    elif verb == "read":
        task = sim.task(w[1])
        data = k.user_read(task, _parse_int(w[2]), _parse_int(w[3]))
        task.outputs.append(("read", w[2], data.hex() if data is not None else "fault"))
    elif verb == "plant_canary":
        task = sim.task(w[1])
        canary = sim.ctx.rng.randbytes(32)
        va = _parse_int(w[2]) if len(w) > 2 else 0x00A0_0000
        k.do_syscall(task, "brk", [max(va + PAGE_SIZE, 0x00A0_0000 + PAGE_SIZE)])
        if k.user_write(task, va, canary):
            sim.canaries.append((w[1], va, canary))
    elif verb == "syscall":
        task = sim.task(w[1])
        args = [_parse_int(a) for a in w[3:]]
        k.do_syscall(task, w[2], args)
    elif verb == "mark":
        sim.marks[w[1]] = dict(sim.ctx.counters)
    elif verb == "kernel":
        _exec_kernel_op(sim, step)
    elif verb == "attack":
        inject_attack(sim, w[1], w[2], w[3] if len(w) > 3 else None)
    elif verb == "assert":
        _exec_assert(sim, step, report)
    else:
        raise ScenarioError(step.lineno, f"unhandled directive {verb}")


def _exec_kernel_op(sim: Simulation, step: Step):
    k = sim.kernel
    w = step.words
    op = w[1]
    if op == "tick":
        k.tick()
        return
    if op == "fork":
        parent = sim.task(w[2])
        ret = k.do_syscall(parent, "fork", [])
        child = k.tasks.get(ret)
        if child is None:
            raise ScenarioError(step.lineno, "fork failed")
        sim.tasks[w[3]] = child
        return
    if op == "resume":
        k.ensure_user(sim.task(w[2]))
        return
    if op == "signal":
        k.deliver_signal(sim.task(w[2]), _parse_int(w[3]))
        return
    if op == "dma_read":
        k.dma_read(w[2], _parse_int(w[3]), _parse_int(w[4]))
        return
    task = sim.task(w[2])
    if op == "swap_out":
        k.ensure_user(task)
        k.swap_out(task, vpn_of(_parse_int(w[3])))
    elif op == "swap_in":
        k.swap_in(task, vpn_of(_parse_int(w[3])))
    elif op == "swap_random":
        vpn = k.pick_swap_victim(task)
        if vpn is not None:
            k.swap_out(task, vpn)
            k.swap_in(task, vpn)
    elif op == "compress":
        k.swap_out(task, vpn_of(_parse_int(w[3])), compress=True)
        k.swap_in(task, vpn_of(_parse_int(w[3])))
    elif op == "migrate":
        k.migrate_page(task, vpn_of(_parse_int(w[3])))
    elif op == "migrate_random":
        vpn = k.pick_swap_victim(task)
        if vpn is not None:
            k.migrate_page(task, vpn)
    elif op == "migrate_all":
        k.migrate_all(task)
    elif op == "dma_map":
        k.dma_map(task, _parse_int(w[3]), _parse_int(w[4]))
    else:
        raise ScenarioError(step.lineno, f"unknown kernel op {op!r}")


def _exec_assert(sim: Simulation, step: Step, report: Report):
    w = step.words[1:]
    text = " ".join(step.words)
    kind = w[0]
    ok, detail = False, ""
    k = sim.kernel
    if kind == "counter":
        actual = sim.ctx.counters.get(w[1], 0)
        ok = actual == _parse_int(w[2])
        detail = f"actual {actual}"
    elif kind == "delta":
        base = sim.marks.get(w[1], {})
        actual = sim.ctx.counters.get(w[2], 0) - base.get(w[2], 0)
        ok = actual == _parse_int(w[3])
        detail = f"actual {actual}"
    elif kind == "violations":
        actual = sim.ctx.counters["violations"]
        ok = actual == _parse_int(w[1])
        detail = f"actual {actual}"
    elif kind == "output":
        task = sim.task(w[1])
        idx = _parse_int(w[2])
        want = w[3]
        have = _format_output(task.outputs[idx]) if idx < len(task.outputs) else "<missing>"
        ok = have == want.strip('"')
        detail = f"actual {have}"
    elif kind == "mem":
        task = sim.task(w[1])
        va = _parse_int(w[2])
        want = _parse_value(w[3])
        have = k.user_read(task, va, len(want))
        ok = have == want
        detail = f"actual {have.hex() if have is not None else 'unmapped'}"
    elif kind == "resident":
        task = sim.task(w[1])
        actual = vpn_of(_parse_int(w[2])) in task.pages
        ok = actual == (w[3] == "true")
        detail = f"actual {actual}"
    elif kind == "sealed":
        task = sim.task(w[1])
        proc = sim.guardian.by_user_root.get(task.user_root)
        actual = proc is not None and vpn_of(_parse_int(w[2])) in proc.seal_meta
        ok = actual == (w[3] == "true")
        detail = f"actual {actual}"
    elif kind == "alive":
        t = sim.tasks.get(w[1])
        actual = t is not None and t.alive
        ok = actual == (w[2] == "true")
        detail = f"actual {actual}"
    elif kind == "file":
        have = bytes(k.fs.get(w[1].strip('"'), b""))
        ok = have == _parse_value(w[2])
        detail = f"actual {have[:64]!r}"
    elif kind == "attacks_contained":
        ok = bool(sim.attacks) and all(a.detected and a.contained for a in sim.attacks)
        detail = f"{sum(1 for a in sim.attacks if a.detected and a.contained)}/{len(sim.attacks)}"
    elif kind == "sweep_clean":
        found = sweep_confidentiality(sim) + scan_kernel_for_canaries(sim)
        ok = not found
        detail = "; ".join(found[:3])
    elif kind == "no_canary_leak":
        found = scan_kernel_for_canaries(sim)
        ok = not found
        detail = "; ".join(found[:3])
    else:
        raise ScenarioError(step.lineno, f"unknown assert kind {kind!r}")
    report.asserts.append((step.lineno, text, ok, detail))


def _format_output(entry) -> str:
    return ":".join(str(x) for x in entry)


def run(scenario, seed: int = 0, paranoid: bool = False, trace: bool = False) -> Report:
    """Execute a scenario deterministically.  Identical (scenario, seed)
    inputs produce byte-identical reports."""
    if isinstance(scenario, str):
        text = scenario
        scenario = parse_scenario(scenario)
    else:
        text = scenario.pretty()
    config = Config(
        frame_count=int(scenario.config.get("frames", 2048)),
        tlb_entries=int(scenario.config.get("tlb_entries", 64)),
        secure_abi=scenario.config.get("secure_abi", "on") != "off",
        paranoid=paranoid,
        guardian_seed=int(scenario.config.get("guardian_seed", 0)),
    )
    report = Report()
    report.seed = seed
    report.scenario_digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    sim = Simulation(seed, config)
    sim.ctx.tracing = trace
    try:
        for step in scenario.steps:
            for _ in range(step.repeat):
                sim.ctx.step += 1
                _exec_step(sim, step, report)
                if step.words[0] in ("write", "read", "syscall") and sim.ctx.rng.random() < 0.05:
                    sim.kernel.tick()
            if not paranoid and step.words[0] != "assert":
                found = sweep_confidentiality(sim)
                if found:
                    sim._sweep_log.extend(found)
    except (RuntimeError, ScenarioError, ValueError, binadapt.AdaptError, crypto.AuthFailure) as exc:
        report.aborted = f"step failed: {exc}"
    report.sweep_findings = list(dict.fromkeys(sim._sweep_log))
    report.sweep_findings += scan_kernel_for_canaries(sim)
    report.counters = dict(sim.ctx.counters)
    report.attacks = sim.attacks
    report.outputs = {
        name: [_format_output(o) for o in task.outputs] for name, task in sorted(sim.tasks.items())
    }
    if sim.kernel.compress_ratios:
        report.misc["compress_ratio_permille_min"] = min(sim.kernel.compress_ratios)
    return report
