"""Simulator of an untrusted OS kernel managing confidential memory under a
trusted Guardian reference monitor.

Subpackages:
    simhw     - simulated machine (physical memory, MMU/TLB, traps)
    crypto    - deterministic page sealing, digests, key wrapping
    capsys    - capability store for semantic kernel access
    guardian  - the reference monitor and its ABI
    oskernel  - the untrusted toy kernel (paging, swap, fork, syscalls)
    binadapt  - binary adaptation tool and image format
    harness   - scenario language, attack injection, sweep oracle, CLI
"""

__version__ = "0.1.0"
