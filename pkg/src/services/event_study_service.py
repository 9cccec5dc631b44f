from datetime import date
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import qr, solve_triangular

from src.exceptions import CollinearityError, InputError, NumericError
from src.logging.logger import get_logger
from src.schemas.events import EVENT_BINS, EventMapping, EventPanel, EventRecord, RegressionResult
from src.schemas.raster import GeoRaster, PatchGrid, PatchId
from src.services.raster_service import raster_service

logger = get_logger(__name__)


class EventStudyService:
    """Two-way fixed-effects event study of score panels around strike events"""

    def map_events(
        self,
        events: Sequence[EventRecord],
        grid: PatchGrid,
        raster: GeoRaster,
        image_dates: Sequence[date]
    ) -> EventMapping:
        """
        Bind each event to (patch, first image date on or after it); keep the earliest per patch.
        Events outside the grid or the image date range are dropped and counted by reason.
        """
        ordinals = np.array([d.toordinal() for d in image_dates])
        first_event: Dict[PatchId, int] = {}
        drops = {"outside_grid": 0, "before_first_image": 0, "after_last_image": 0}
        for event in events:
            patch_id = raster_service.point_to_patch(grid, raster, event.lonlat)
            if patch_id is None:
                drops["outside_grid"] += 1
                continue
            if event.date.toordinal() < ordinals[0]:
                drops["before_first_image"] += 1
                continue
            index = int(np.searchsorted(ordinals, event.date.toordinal(), side="left"))
            if index >= len(ordinals):
                drops["after_last_image"] += 1
                continue
            first_event[patch_id] = min(index, first_event.get(patch_id, index))

        mapping = EventMapping(first_event=first_event, drops=drops, n_events=len(events))
        logger.info(
            f"Mapped {len(events)} events to {len(first_event)} patches of {grid.city_id}, "
            f"dropped {mapping.dropped} ({drops})"
        )
        return mapping

    def build_design(
        self,
        outcome: np.ndarray,
        patch_ids: Sequence[PatchId],
        mapping: EventMapping
    ) -> EventPanel:
        """
        Long panel from an outcome matrix (dates, patches) with one indicator per bin -5..+5.

        Offsets of +6 and later fall into +5; offsets of -6 and earlier form the omitted reference.
        """
        n_dates, n_patches = outcome.shape
        if n_patches != len(patch_ids):
            raise InputError("Outcome matrix and patch list disagree")

        patch_index = np.repeat(np.arange(n_patches), n_dates)
        time_index = np.tile(np.arange(n_dates), n_patches)
        first = np.array([mapping.first_event.get(tuple(pid), -1) for pid in patch_ids])
        treated = first[patch_index] >= 0
        event_time = np.where(treated, time_index - first[patch_index], np.nan)

        design = np.zeros((len(patch_index), len(EVENT_BINS)))
        binned = np.minimum(event_time[treated], EVENT_BINS[-1])
        observed = binned >= EVENT_BINS[0]
        rows = np.flatnonzero(treated)[observed]
        design[rows, (binned[observed] - EVENT_BINS[0]).astype(int)] = 1.0

        return EventPanel(
            patch_index=patch_index,
            time_index=time_index,
            outcome=outcome.T.reshape(-1).astype(np.float64),
            event_time=event_time,
            design=design,
            patch_ids=[tuple(pid) for pid in patch_ids]
        )

    def within_transform(
        self,
        panel: EventPanel,
        tol: float = 1e-10,
        max_sweeps: int = 10000,
        effects: Tuple[str, ...] = ("patch", "time")
    ) -> Tuple[np.ndarray, np.ndarray, int]:
        """
        Alternating demeaning by patch and by date until the largest change of a sweep
        drops below `tol`. Returns demeaned outcome, demeaned design and the sweep count.
        """
        groups = []
        if "patch" in effects:
            groups.append(panel.patch_index)
        if "time" in effects:
            groups.append(panel.time_index)
        if not groups:
            raise InputError("within_transform needs at least one fixed effect")
        if len(groups) == 2 and (len(np.unique(panel.patch_index)) < 2 or len(np.unique(panel.time_index)) < 2):
            raise InputError("Two-way fixed effects need at least 2 patches and 2 dates")

        data = np.column_stack([panel.outcome, panel.design]).astype(np.float64)
        counts = [np.bincount(group) for group in groups]
        for sweep in range(1, max_sweeps + 1):
            change = 0.0
            for group, count in zip(groups, counts):
                means = np.column_stack([
                    np.bincount(group, weights=data[:, j], minlength=len(count)) for j in range(data.shape[1])
                ]) / np.maximum(count, 1)[:, None]
                step = means[group]
                change = max(change, float(np.abs(step).max()))
                data -= step
            if change < tol or len(groups) == 1:
                return data[:, 0], data[:, 1:], sweep
        raise NumericError(f"Within transform did not converge in {max_sweeps} sweeps")

    def estimate(self, panel: EventPanel, tol: float = 1e-10, max_sweeps: int = 10000) -> RegressionResult:
        """OLS of the demeaned outcome on the demeaned bin indicators via pivoted QR"""
        y, x, sweeps = self.within_transform(panel, tol, max_sweeps)
        if not np.any(panel.design):
            raise CollinearityError("No treated observation falls in any event-time bin", offending_bin=panel.bins[0])

        q, r, pivots = qr(x, mode="economic", pivoting=True)
        diagonal = np.abs(np.diag(r))
        # measured against the raw indicators: fully absorbed columns leave only rounding noise
        scale = float(np.linalg.norm(panel.design, axis=0).max())
        rank = int(np.sum(diagonal > 1e-10 * scale * max(x.shape)))
        if rank < x.shape[1]:
            offending = panel.bins[int(pivots[rank])]
            raise CollinearityError(f"Event-time bin {offending:+d} is collinear with the fixed effects",
                                    offending_bin=offending)

        solution = solve_triangular(r, q.T @ y)
        beta = np.empty(x.shape[1])
        beta[pivots] = solution
        coefficients = {bin_: float(value) for bin_, value in zip(panel.bins, beta)}
        logger.info(f"Event study on {panel.n_obs} observations: " +
                    ", ".join(f"{b:+d}={v:.4f}" for b, v in coefficients.items()))
        return RegressionResult(coefficients=coefficients, n_obs=panel.n_obs, converged=True, sweeps=sweeps)

    def simulate_panel(
        self,
        n_patches: int = 1000,
        n_dates: int = 22,
        n_treated: int = 50,
        effect: float = 0.2,
        noise_sigma: float = 0.01,
        seed: int = 0,
        event_window: Optional[Tuple[int, int]] = None
    ) -> EventPanel:
        """
        Known-truth panel: patch effects, date effects, Gaussian noise and a persistent
        jump of `effect` from event time 0 onwards for the treated patches.
        """
        rng = np.random.default_rng(seed)
        low, high = event_window or (6, max(6, n_dates - 6))
        patch_effects = rng.normal(0.3, 0.1, n_patches)
        date_effects = rng.normal(0.0, 0.05, n_dates)
        treated = rng.choice(n_patches, n_treated, replace=False)
        first = {(int(p), 0): int(rng.integers(low, high + 1)) for p in sorted(treated)}

        outcome = patch_effects[None, :] + date_effects[:, None] + rng.normal(0, noise_sigma, (n_dates, n_patches))
        for (patch, _), index in first.items():
            outcome[index:, patch] += effect
        patch_ids: List[PatchId] = [(p, 0) for p in range(n_patches)]
        return self.build_design(outcome, patch_ids, EventMapping(first_event=first, n_events=n_treated))

    def outcome_matrix(self, scores: np.ndarray, patch_ids: Sequence[PatchId]) -> np.ndarray:
        """(dates, patches) slice of a (dates, rows, cols) score array"""
        rows = np.array([r for r, _ in patch_ids], dtype=int)
        cols = np.array([c for _, c in patch_ids], dtype=int)
        return scores[:, rows, cols]


event_study_service = EventStudyService()
