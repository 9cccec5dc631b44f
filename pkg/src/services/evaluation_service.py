import math
from typing import Dict, Optional

import numpy as np
from scipy.stats import rankdata

from src.exceptions import ClassError, ConfigurationError, InputError, UndefinedPrecisionError
from src.logging.logger import get_logger
from src.schemas.evaluation import (
    ConfusionCounts,
    EvaluationReport,
    PRCurve,
    ROCCurve,
    ScoredLabelSet,
    Stage,
    StageReport,
)
from src.schemas.labels import LabelClass, LabelPanel, SplitAssignment, SplitName
from src.schemas.raster import PatchGrid
from src.schemas.scores import ScorePanel

logger = get_logger(__name__)


class EvaluationService:
    """Imbalance-aware metrics: ROC-AUC, precision-recall and the confusion-from-rates arithmetic"""

    def roc_auc(self, scored: ScoredLabelSet) -> float:
        """Probability that a random positive outscores a random negative, ties counted 1/2 (midranks)"""
        positives, negatives = scored.positives, scored.negatives
        if positives == 0 or negatives == 0:
            raise ClassError(f"AUC needs both classes, got {positives} positives and {negatives} negatives")
        ranks = rankdata(scored.scores, method="average")
        rank_sum = float(ranks[scored.labels == 1].sum())
        return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives)

    def roc_curve(self, scored: ScoredLabelSet) -> ROCCurve:
        if scored.positives == 0 or scored.negatives == 0:
            raise ClassError("ROC curve needs both classes")
        thresholds, tp, fp = self._sweep(scored)
        return ROCCurve(
            # leading (0, 0) point sits above every score
            thresholds=np.concatenate([[np.inf], thresholds]),
            fpr=np.concatenate([[0.0], fp / scored.negatives]),
            tpr=np.concatenate([[0.0], tp / scored.positives])
        )

    def pr_curve(self, scored: ScoredLabelSet) -> PRCurve:
        """
        Thresholds at every distinct score, descending. AP is the step sum
        sum_n (R_n - R_{n-1}) * P_n with R_0 = 0.
        """
        if scored.positives == 0:
            raise ClassError("Precision-recall curve needs at least one positive")
        thresholds, tp, fp = self._sweep(scored)
        precision = tp / (tp + fp)
        recall = tp / scored.positives
        average_precision = float(np.sum(np.diff(recall, prepend=0.0) * precision))
        return PRCurve(
            thresholds=thresholds,
            recall=recall,
            precision=precision,
            average_precision=min(max(average_precision, 0.0), 1.0)
        )

    def rebalance_upsample(self, scored: ScoredLabelSet, seed: int = 0) -> ScoredLabelSet:
        """
        Replicate positives round-robin until they match the negatives. The round-robin
        order is a seeded permutation of the positives, so with an uneven ratio `seed`
        decides which positives receive the extra copy.
        """
        positives, negatives = scored.positives, scored.negatives
        if positives == 0:
            raise ClassError("Cannot rebalance a set without positives")
        if positives >= negatives:
            return scored
        order = np.random.default_rng([seed, 7]).permutation(np.flatnonzero(scored.labels == 1))
        extra = order[np.arange(negatives - positives) % positives]
        return ScoredLabelSet(
            scores=np.concatenate([scored.scores, scored.scores[extra]]),
            labels=np.concatenate([scored.labels, scored.labels[extra]])
        )

    def confusion_from_rates(self, total: int, positives: int, tpr: float, fpr: float) -> ConfusionCounts:
        """Expected confusion counts for given rates; counts round half up"""
        if not 0 <= positives <= total:
            raise ConfigurationError(f"positives={positives} must lie in [0, total={total}]")
        if not (0.0 <= tpr <= 1.0 and 0.0 <= fpr <= 1.0):
            raise ConfigurationError(f"Rates must lie in [0, 1], got tpr={tpr}, fpr={fpr}")

        tp = int(math.floor(tpr * positives + 0.5))
        fp = int(math.floor(fpr * (total - positives) + 0.5))
        if tp + fp == 0:
            raise UndefinedPrecisionError("No positive predictions: precision is undefined")
        return ConfusionCounts(
            tp=tp,
            fp=fp,
            fn=positives - tp,
            tn=total - positives - fp,
            precision=tp / (tp + fp),
            balanced_precision=tpr / (tpr + fpr)
        )

    def scored_test_set(
        self,
        panel: ScorePanel,
        labels: LabelPanel,
        split: SplitAssignment,
        stage: Stage
    ) -> ScoredLabelSet:
        """(score, label) pairs of Test-split patches with a known label"""
        scores = panel.stage1 if stage == Stage.STAGE1 else panel.stage2
        if scores is None:
            raise InputError(f"Score panel of {panel.city_id} has no {stage.value} scores")
        if labels.image_dates != panel.dates:
            raise InputError("Label panel and score panel cover different dates")

        test_mask = np.zeros(panel.mask.shape, dtype=bool)
        for row, col in split.ids(SplitName.TEST):
            test_mask[row, col] = True
        cell_mask = (test_mask & panel.mask & labels.mask)[None] & (labels.codes != LabelClass.UNKNOWN)
        return ScoredLabelSet.from_arrays(scores[cell_mask], labels.codes[cell_mask] == LabelClass.DESTROYED)

    def evaluate_stage(
        self,
        city: str,
        stage: Stage,
        scored: ScoredLabelSet,
        report: EvaluationReport,
        seed: int = 0
    ) -> StageReport:
        auc = ap_unbalanced = ap_balanced = float("nan")
        try:
            auc = self.roc_auc(scored)
            report.roc_curves[stage] = self.roc_curve(scored)
        except ClassError as e:
            logger.warning(f"{city} {stage.value}: AUC undefined ({e})")
        try:
            unbalanced = self.pr_curve(scored)
            balanced = self.pr_curve(self.rebalance_upsample(scored, seed))
            ap_unbalanced, ap_balanced = unbalanced.average_precision, balanced.average_precision
            report.pr_curves[stage] = unbalanced
            report.balanced_pr_curves[stage] = balanced
        except ClassError as e:
            logger.warning(f"{city} {stage.value}: average precision undefined ({e})")

        return StageReport(
            city=city,
            stage=stage,
            auc=auc,
            ap_unbalanced=ap_unbalanced,
            ap_balanced=ap_balanced,
            n_test=len(scored),
            prevalence=scored.positives / len(scored) if len(scored) else float("nan")
        )

    def evaluate_run(
        self,
        panel: ScorePanel,
        labels: LabelPanel,
        split: SplitAssignment,
        grid: Optional[PatchGrid] = None
    ) -> EvaluationReport:
        """Stage-1 and (when smoothed) stage-2 metrics on the Test split"""
        report = EvaluationReport(city=panel.city_id, stages=[])
        stages = [Stage.STAGE1, Stage.STAGE2] if panel.is_smoothed else [Stage.STAGE1]
        for stage in stages:
            scored = self.scored_test_set(panel, labels, split, stage)
            if len(scored) == 0:
                logger.warning(f"No labeled Test-split samples for {panel.city_id}; {stage.value} metrics are undefined")
            stage_report = self.evaluate_stage(panel.city_id, stage, scored, report, split.seed)
            report.stages.append(stage_report)
            logger.info(
                f"{panel.city_id} {stage.value}: AUC={stage_report.auc:.4f} "
                f"AP(1:1)={stage_report.ap_balanced:.4f} AP={stage_report.ap_unbalanced:.4f} "
                f"n={stage_report.n_test} prevalence={stage_report.prevalence:.4f}"
            )
        if grid is not None and panel.is_smoothed and grid.no_analysis:
            report.no_analysis = self.no_analysis_summary(panel, grid)
        return report

    def no_analysis_summary(self, panel: ScorePanel, grid: PatchGrid) -> Dict[str, float]:
        """Scores inside no-analysis zones: out-of-sample by construction"""
        zone = grid.no_analysis_mask()
        if not zone.any():
            return {"patches": 0}
        summary = {
            "patches": int(zone.sum()),
            "stage1_mean": float(panel.stage1[:, zone].mean()),
        }
        if panel.is_smoothed:
            summary["stage2_mean"] = float(panel.stage2[:, zone].mean())
            summary["binary_share_final"] = float(panel.binary[-1][zone].mean())
        return summary

    def _sweep(self, scored: ScoredLabelSet):
        """Cumulative TP/FP counts at each distinct threshold, highest first"""
        order = np.argsort(-scored.scores, kind="mergesort")
        scores = scored.scores[order]
        labels = scored.labels[order].astype(np.int64)
        # last index of every run of equal scores
        ends = np.flatnonzero(np.diff(scores) != 0)
        ends = np.append(ends, len(scores) - 1)
        tp = np.cumsum(labels)[ends].astype(np.float64)
        fp = (ends + 1) - tp
        return scores[ends], tp, fp


evaluation_service = EvaluationService()
