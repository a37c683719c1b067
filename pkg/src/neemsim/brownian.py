"""Deterministic, seedable Brownian increments on macro and sub-grids.

All randomness flows through counter-based Philox substreams keyed by
``(seed, purpose)`` with the counter words carrying ``(path, macro step,
trial/offset)``.  A draw is therefore a pure function of its key and never
depends on worker count or call order, which is what makes whole ensembles
reproducible under any parallel schedule.

Two keying schemes coexist:

- :func:`path_stream` hands out one stream per ``(seed, path)`` that is
  consumed along the whole trajectory.  Plain Euler-Maruyama paths and the
  fine-step reference oracle use it; it makes refactoring a grid between
  macro steps and substeps a no-op.
- :func:`sample_panel` draws the increments of one macro step of one path
  (optionally one retrial) in a single panel.  The rejection sampler and the
  CLI's plain-EM scheme share these panels, so a degenerate (linear) run of
  the corrected scheme reproduces plain EM bit for bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, TimeGrid

_MASK64 = (1 << 64) - 1
_local = threading.local()

PURPOSE_PANEL = 1
PURPOSE_BRIDGE = 2
PURPOSE_THINNING = 3
PURPOSE_RESAMPLE = 4
PURPOSE_WHOLE_PATH = 5
PURPOSE_ORACLE = 6
PURPOSE_INIT = 7

#: Interior times are quantized to this many ticks per macro interval when
#: keying bridge draws; two times in the same tick share one draw.
BRIDGE_TICKS = 1 << 20


def substream(
    seed: int, purpose: int, w0: int = 0, w1: int = 0, w2: int = 0, fresh: bool = False
) -> np.random.Generator:
    """Generator for the Philox substream keyed by (seed, purpose, words).

    By default the returned generator is a thread-local instance whose
    state is re-seated on the requested counter (constructing a bit
    generator from scratch pulls OS entropy and costs ten times as much):
    consume it before the next ``substream`` call on the same thread.
    Pass ``fresh=True`` for an independent instance that may be held across
    other calls, e.g. a whole-trajectory stream.

    The key words live in the three high counter words: generation
    consumes the low word (little-endian), so substreams stay disjoint for
    any draw shorter than 2^64 blocks.
    """
    key = np.array([seed & _MASK64, purpose & _MASK64], dtype=np.uint64)
    counter = np.array([0, w0 & _MASK64, w1 & _MASK64, w2 & _MASK64], dtype=np.uint64)
    if fresh:
        return np.random.Generator(np.random.Philox(counter=counter, key=key))
    cached = getattr(_local, "gen", None)
    if cached is None:
        bitgen = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        template = bitgen.state
        cached = (np.random.Generator(bitgen), bitgen, template)
        _local.gen = cached
    gen, bitgen, template = cached
    template["state"]["counter"] = counter
    template["state"]["key"] = key
    template["buffer_pos"] = 4
    template["has_uint32"] = 0
    template["uinteger"] = 0
    bitgen.state = template
    return gen


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    """Whole-trajectory stream for one path; independent instance, safe to
    hold while other substreams are drawn."""
    return substream(seed, PURPOSE_WHOLE_PATH, path_index, fresh=True)


@dataclass(frozen=True)
class IncrementPanel:
    """Brownian increments of one macro step on the sub-grid.

    ``increments`` has shape ``(channels, substeps)`` with variance
    ``dt_sub`` per entry; ``cumulative`` has shape
    ``(channels, substeps + 1)`` and holds the prefix sums with a leading
    zero column, so the value at sub-node ``r`` is exactly the sum of the
    first ``r`` increments.
    """

    t_start: float
    dt_sub: float
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2:
            raise ConfigurationError("increments must be (channels, substeps)")
        object.__setattr__(self, "increments", inc)
        cum = np.zeros((inc.shape[0], inc.shape[1] + 1))
        np.cumsum(inc, axis=1, out=cum[:, 1:])
        object.__setattr__(self, "_cumulative", cum)

    @property
    def channels(self) -> int:
        return self.increments.shape[0]

    @property
    def substeps(self) -> int:
        return self.increments.shape[1]

    @property
    def cumulative(self) -> np.ndarray:
        return self._cumulative

    @property
    def t_end(self) -> float:
        return self.t_start + self.dt_sub * self.substeps


def sample_panel(
    grid: TimeGrid,
    macro_index: int,
    path_index: int,
    seed: int,
    channels: int,
    trial: int = 0,
) -> IncrementPanel:
    """Draw the increment panel of one macro step of one path.

    The output is a pure function of ``(seed, path_index, macro_index,
    trial, channel, substep)``.  ``trial`` distinguishes the fresh proposals
    drawn by the rejection sampler's retries; plain stepping uses trial 0.
    """
    if not 0 <= macro_index < grid.macro_steps:
        raise ConfigurationError(
            f"macro_index {macro_index} outside grid with {grid.macro_steps} steps"
        )
    if path_index < 0:
        raise ConfigurationError("path_index must be >= 0")
    rng = substream(seed, PURPOSE_PANEL, path_index, macro_index, trial)
    z = rng.standard_normal((channels, grid.substeps_per_macro))
    return IncrementPanel(
        t_start=grid.t0 + macro_index * grid.dt,
        dt_sub=grid.dt_sub,
        increments=z * np.sqrt(grid.dt_sub),
    )


def _bridge_offset(panel: IncrementPanel, u: float) -> int:
    span = panel.dt_sub * panel.substeps
    return int(round((u - panel.t_start) / span * BRIDGE_TICKS))


def value_at(
    panel: IncrementPanel,
    u: float,
    *,
    seed: int,
    path_index: int,
    macro_index: int,
    trial: int = 0,
) -> np.ndarray:
    """Per-channel Brownian value at an interior time of the panel.

    At a sub-node the stored cumulative value is returned exactly.  Between
    nodes the value is drawn by Brownian-bridge conditioning on the two
    enclosing sub-nodes (mean: linear interpolation, variance:
    ``(u-t_l)(t_r-u)/(t_r-t_l)``) from the substream keyed by the quantized
    offset of ``u``, so repeated evaluation at one time is consistent.
    """
    t0, h, ns = panel.t_start, panel.dt_sub, panel.substeps
    tol = 1e-9
    if not t0 - tol * h <= u <= panel.t_end + tol * h:
        raise ConfigurationError(f"time {u} outside panel [{t0}, {panel.t_end}]")
    pos = (u - t0) / h
    nearest = int(round(pos))
    if abs(pos - nearest) < tol and 0 <= nearest <= ns:
        return panel.cumulative[:, nearest].copy()
    left = min(int(pos), ns - 1)
    frac = pos - left
    lo = panel.cumulative[:, left]
    hi = panel.cumulative[:, left + 1]
    mean = lo + (hi - lo) * frac
    var = h * frac * (1.0 - frac)
    rng = substream(
        seed,
        PURPOSE_BRIDGE,
        path_index,
        macro_index,
        (trial << 24) | _bridge_offset(panel, u),
    )
    return mean + np.sqrt(var) * rng.standard_normal(panel.channels)
