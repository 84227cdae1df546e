"""Canned workload scenarios for the randomized verification suite.

Each scenario is attack-free and designed to push a different slice of the
machinery (swap churn, migration, fork trees, file I/O, heap growth,
signals, DMA, the signature-page chain).  Randomization comes from the run
seed: victim picks, migration targets and preemption points all draw from
the seeded RNG, so ten seeds of one scenario take ten different paths.
"""

HEADER = "config frames 1024\n"

_PREP = """
spawn t1 demo sensitive
syscall t1 brk 0xa10000
write t1 0xa00000 "workset-page-0aaaaaaaaaaaaaaaaaaa"
write t1 0xa01000 "workset-page-1bbbbbbbbbbbbbbbbbbb"
write t1 0xa02000 "workset-page-2ccccccccccccccccccc"
write t1 0xa03000 "workset-page-3ddddddddddddddddddd"
plant_canary t1 0xa0f000
"""

_CHECK = """
assert mem t1 0xa00000 "workset-page-0aaaaaaaaaaaaaaaaaaa"
assert mem t1 0xa01000 "workset-page-1bbbbbbbbbbbbbbbbbbb"
assert mem t1 0xa02000 "workset-page-2ccccccccccccccccccc"
assert mem t1 0xa03000 "workset-page-3ddddddddddddddddddd"
assert violations 0
assert sweep_clean
"""


def _swap_churn() -> str:
    return HEADER + _PREP + "repeat 60 kernel swap_random t1\n" + _CHECK


def _migrate_churn() -> str:
    return HEADER + _PREP + "repeat 80 kernel migrate_random t1\n" + _CHECK


def _fork_tree() -> str:
    return (
        HEADER
        + _PREP
        + """
kernel fork t1 t2
write t1 0xa00000 "workset-page-0aaaaaaaaaaaaaaaaaaa"
kernel resume t2
read t2 0xa01000 33
write t2 0xa01000 "child-page-1-divergent-content!!!"
kernel fork t2 t3
kernel resume t3
read t3 0xa01000 33
read t3 0xa02000 33
kernel resume t2
read t2 0xa03000 33
kernel resume t1
repeat 20 kernel swap_random t2
repeat 20 kernel migrate_random t3
"""
        + _CHECK
    )


def _file_io() -> str:
    return (
        HEADER
        + _PREP
        + """
write t1 0x800000 "log.txt\\0"
syscall t1 open 0x800000
repeat 25 syscall t1 write 3 0xa00000 32
syscall t1 close 3
syscall t1 open 0x800000
repeat 25 syscall t1 read 3 0xa04000 32
read t1 0xa04000 32
"""
        + _CHECK
    )


def _heap_growth() -> str:
    return (
        HEADER
        + _PREP
        + """
syscall t1 brk 0xa40000
repeat 30 write t1 0xa20000 "grown-heap-content"
syscall t1 mmap 0 16384 3 0 0 0
repeat 15 kernel swap_random t1
syscall t1 munmap 0xc00000 16384
repeat 15 kernel migrate_random t1
"""
        + _CHECK
    )


def _signals() -> str:
    return (
        HEADER
        + _PREP
        + """
poke t1 0x800100 00104000000000000000000000000000
syscall t1 sigaction 10 0x800100
repeat 20 kernel signal t1 10
"""
        + _CHECK
    )


def _mixed_tasks() -> str:
    return (
        HEADER
        + _PREP
        + """
spawn p1 demo plain
spawn p2 bigdata plain
syscall p1 brk 0xa08000
write p1 0xa00000 "plain-task-heap-data"
kernel fork p1 p3
kernel resume p3
read p3 0xa00000 20
repeat 10 kernel tick
repeat 20 kernel swap_random t1
repeat 10 kernel swap_random p1
repeat 10 kernel migrate_random p2
read t1 0xa00000 33
repeat 10 kernel tick
"""
        + _CHECK
    )


def _dma_shared() -> str:
    return (
        HEADER
        + _PREP
        + """
syscall t1 mmap 0 8192 3 1 0 0
write t1 0xc00000 "shared-dma-buffer-contents"
kernel dma_map t1 0x2000 0xc00000
kernel dma_read dev0 0x2000 26
repeat 20 kernel swap_random t1
repeat 20 kernel migrate_random t1
"""
        + _CHECK
    )


def _merkle_stress() -> str:
    # Seal data pages, then the signature page, then the root; resurrect
    # everything through chained swap-ins, repeatedly.
    chain = """
kernel swap_out t1 0xa00000
kernel swap_out t1 0xa02000
kernel swap_out t1 0x70014000
kernel swap_out t1 0x70020000
kernel swap_in t1 0xa00000
kernel swap_in t1 0xa02000
"""
    return HEADER + _PREP + chain * 8 + "repeat 8 kernel compress t1 0xa01000\n" + _CHECK


def _bigdata_churn() -> str:
    return (
        HEADER
        + """
spawn t1 bigdata sensitive
syscall t1 brk 0xa08000
write t1 0xa00000 "workset-page-0aaaaaaaaaaaaaaaaaaa"
write t1 0xa01000 "workset-page-1bbbbbbbbbbbbbbbbbbb"
write t1 0xa02000 "workset-page-2ccccccccccccccccccc"
write t1 0xa03000 "workset-page-3ddddddddddddddddddd"
plant_canary t1 0xa07000
read t1 0x600000 16
read t1 0x604000 16
read t1 0x607000 16
repeat 40 kernel swap_random t1
repeat 40 kernel migrate_random t1
"""
        + _CHECK
    )


WORKLOADS = {
    "swap_churn": _swap_churn,
    "migrate_churn": _migrate_churn,
    "fork_tree": _fork_tree,
    "file_io": _file_io,
    "heap_growth": _heap_growth,
    "signals": _signals,
    "mixed_tasks": _mixed_tasks,
    "dma_shared": _dma_shared,
    "merkle_stress": _merkle_stress,
    "bigdata_churn": _bigdata_churn,
}


def suite() -> list:
    """(name, scenario text) for every canned workload."""
    return [(name, build()) for name, build in WORKLOADS.items()]
