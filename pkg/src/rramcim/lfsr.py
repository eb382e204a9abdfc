"""Counter-propagating LFSR pair used as the on-chip pseudo-random source.

Two 16-bit maximal-length Fibonacci LFSRs shift in opposite directions and
their registers are XORed, which decorrelates values handed to adjacent
neurons. Taps implement x^16 + x^14 + x^13 + x^11 + 1; the reversed chain
uses the reciprocal polynomial so both are full period (2^16 - 1).
"""

from dataclasses import dataclass

MASK16 = 0xFFFF
LFSR_PERIOD = (1 << 16) - 1


def _step_forward(state):
    # taps at bits 0, 2, 3, 5 of the right-shifting register
    fb = ((state >> 0) ^ (state >> 2) ^ (state >> 3) ^ (state >> 5)) & 1
    return ((state >> 1) | (fb << 15)) & MASK16


def _step_backward(state):
    # mirrored taps for the left-shifting register
    fb = ((state >> 15) ^ (state >> 13) ^ (state >> 12) ^ (state >> 10)) & 1
    return ((state << 1) | fb) & MASK16


@dataclass
class LfsrPair:
    """State of the two chains. States must never be all-zero."""

    forward_state: int = 0xACE1
    backward_state: int = 0x1D2C

    def __post_init__(self):
        self.forward_state &= MASK16
        self.backward_state &= MASK16
        if self.forward_state == 0 or self.backward_state == 0:
            raise ValueError("LFSR state must be nonzero")

    @classmethod
    def from_seed(cls, seed):
        seed = int(seed)
        f = (seed & MASK16) or 0xACE1
        b = ((seed >> 16) & MASK16) or 0x1D2C
        return cls(f, b)


def lfsr_sample(pair):
    """Advance both chains one step in opposite directions; return the XOR.

    Returns (value, pair) with the mutated pair, value in [0, 0xFFFF].
    """
    pair.forward_state = _step_forward(pair.forward_state)
    pair.backward_state = _step_backward(pair.backward_state)
    return pair.forward_state ^ pair.backward_state, pair


def sample_block(pair, n):
    """Draw n successive values, one per neuron position along the chain."""
    out = []
    for _ in range(n):
        v, _ = lfsr_sample(pair)
        out.append(v)
    return out


def uniform01(pair):
    """One draw mapped to the open interval (0, 1), symmetric about 0.5."""
    v, _ = lfsr_sample(pair)
    return (v + 0.5) / 65536.0
