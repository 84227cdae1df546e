"""Address-space layout shared by the machine, the Guardian and the kernel.

32-bit virtual addresses, two-level 10/10/12 page tables, 4 KiB pages.
User half is below KERNEL_BASE; the kernel half is a linear direct map of
physical memory (kernel VA = KERNEL_BASE + physical address).

Every process uses the same fixed user layout.  Ordinary data (text, data,
bss, heap, stack and anything mmap returns) must stay inside USER_SPAN so
that each page has a signature slot; the signature region and the
trampoline page sit above the span at fixed addresses.
"""

PAGE_SIZE = 4096
PAGE_SHIFT = 12
L1_ENTRIES = 1024
L2_ENTRIES = 1024

KERNEL_BASE = 0x8000_0000

# User layout (identical for every process).
TEXT_VA = 0x0040_0000
DATA_VA = 0x0060_0000
BSS_VA = 0x0080_0000
HEAP_VA = 0x00A0_0000
STACK_PAGES = 16
STACK_TOP = 0x0100_0000
STACK_BASE = STACK_TOP - STACK_PAGES * PAGE_SIZE

# All signable user data lives in vpns [0, SPAN_PAGES).
USER_SPAN = 0x0100_0000
SPAN_PAGES = USER_SPAN // PAGE_SIZE  # 4096

SIG_REGION_VA = 0x7000_0000
TRAMPOLINE_VA = 0x7FFF_F000

DIGEST_SIZE = 32
SLOTS_PER_PAGE = PAGE_SIZE // DIGEST_SIZE  # 128

# Bytes below the interrupted stack pointer that the kernel may write while
# setting up a signal frame.
STACK_CAP_SPAN = 512


def _sig_levels(span_pages: int) -> list[int]:
    """Page counts per signature-tree level, leaves first, root last."""
    levels = []
    n = (span_pages + SLOTS_PER_PAGE - 1) // SLOTS_PER_PAGE
    while True:
        levels.append(n)
        if n == 1:
            return levels
        n = (n + SLOTS_PER_PAGE - 1) // SLOTS_PER_PAGE


SIG_LEVELS = _sig_levels(SPAN_PAGES)          # [32, 1]
SIG_PAGES = sum(SIG_LEVELS)                   # 33
SIG_REGION_END = SIG_REGION_VA + SIG_PAGES * PAGE_SIZE

# Starting VA of each signature level.
_level_bases = []
_va = SIG_REGION_VA
for _n in SIG_LEVELS:
    _level_bases.append(_va)
    _va += _n * PAGE_SIZE
SIG_LEVEL_BASES = _level_bases

ROOT_SLOT = -1  # sentinel: the slot for the root signature page is Guardian-held


def vpn_of(va: int) -> int:
    return va >> PAGE_SHIFT


def page_base(va: int) -> int:
    return va & ~(PAGE_SIZE - 1)


def sig_slot_va(vpn: int):
    """Signature-slot address for a vpn, ROOT_SLOT for the root signature
    page, or None for pages that are never sealed (e.g. the trampoline)."""
    if vpn < SPAN_PAGES:
        return SIG_LEVEL_BASES[0] + DIGEST_SIZE * vpn
    for level, base in enumerate(SIG_LEVEL_BASES):
        first = vpn_of(base)
        if first <= vpn < first + SIG_LEVELS[level]:
            if level == len(SIG_LEVELS) - 1:
                return ROOT_SLOT
            return SIG_LEVEL_BASES[level + 1] + DIGEST_SIZE * (vpn - first)
    return None


def is_sig_vpn(vpn: int) -> bool:
    return vpn_of(SIG_REGION_VA) <= vpn < vpn_of(SIG_REGION_END)


def is_user_va(va: int) -> bool:
    return 0 <= va < KERNEL_BASE


def direct_map_va(pa: int) -> int:
    return KERNEL_BASE + pa
