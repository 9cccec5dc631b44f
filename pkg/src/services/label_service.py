import hashlib
from collections import defaultdict
from datetime import date
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from src.exceptions import ClassError, ConfigurationError
from src.logging.logger import get_logger
from src.schemas.labels import (
    Annotation,
    AnnotationBinding,
    DamageClass,
    LabelClass,
    LabeledSample,
    LabelPanel,
    PatchLabelMap,
    SampleKey,
    SplitAssignment,
    SplitName,
)
from src.schemas.raster import GeoRaster, PatchGrid, PatchId
from src.services.raster_service import raster_service

logger = get_logger(__name__)


class LabelService:
    """Annotation merging, temporal label propagation and the patch-level split"""

    def bind_annotation_dates(
        self,
        annotations: Sequence[Annotation],
        image_dates: Sequence[date],
        binding: AnnotationBinding = AnnotationBinding.EXACT
    ) -> List[Annotation]:
        """Snap annotation dates to the nearest image date when binding is `nearest`"""
        if binding == AnnotationBinding.EXACT:
            return list(annotations)
        ordinals = np.array([d.toordinal() for d in image_dates])
        bound = []
        for annotation in annotations:
            # ties go to the earlier image date
            nearest = image_dates[int(np.argmin(np.abs(ordinals - annotation.date.toordinal())))]
            bound.append(annotation.model_copy(update={"date": nearest}))
        return bound

    def group_by_date(self, annotations: Iterable[Annotation]) -> Dict[date, List[Annotation]]:
        groups: Dict[date, List[Annotation]] = defaultdict(list)
        for annotation in annotations:
            groups[annotation.date].append(annotation)
        return dict(sorted(groups.items()))

    def label_at_annotation_date(
        self,
        grid: PatchGrid,
        raster: GeoRaster,
        annotations: Sequence[Annotation],
        when: date,
        annotation_dates: Optional[Sequence[date]] = None
    ) -> PatchLabelMap:
        """
        Destroyed if at least one Destroyed annotation falls in the patch, Unknown if only
        Moderate/Severe annotations do, Intact otherwise. No-analysis patches are Unknown.
        """
        if annotation_dates is not None and when not in annotation_dates:
            raise ConfigurationError(f"{when} is not a declared annotation date")
        for annotation in annotations:
            if annotation.date != when:
                raise ConfigurationError(
                    f"Annotation dated {annotation.date} passed for annotation date {when}"
                )

        mask = grid.included_mask()
        destroyed = np.zeros(mask.shape, dtype=bool)
        excluded = np.zeros(mask.shape, dtype=bool)
        dropped = 0
        for annotation in annotations:
            patch_id = raster_service.point_to_patch(grid, raster, annotation.lonlat)
            if patch_id is None:
                dropped += 1
                continue
            if annotation.damage_class == DamageClass.DESTROYED:
                destroyed[patch_id] = True
            else:
                excluded[patch_id] = True

        codes = np.full(mask.shape, LabelClass.INTACT, dtype=np.int8)
        codes[excluded] = LabelClass.UNKNOWN
        codes[destroyed] = LabelClass.DESTROYED
        codes[grid.no_analysis_mask()] = LabelClass.UNKNOWN
        codes[~mask] = LabelClass.UNKNOWN

        if dropped:
            logger.debug(f"{dropped} annotations at {when} fall outside the grid of {grid.city_id}")
        return PatchLabelMap(date=when, codes=codes, mask=mask)

    def propagate(
        self,
        label_maps: Sequence[PatchLabelMap],
        image_dates: Sequence[date],
        city_id: str = ""
    ) -> LabelPanel:
        """
        Extend annotation-date labels to every image date under the no-reconstruction assumption.

        For image date t: Destroyed if the latest annotation at or before t is Destroyed;
        otherwise Intact if the earliest annotation at or after t is Intact; otherwise Unknown
        (destroyed between two annotations, after the last Intact annotation, before the first
        Destroyed one, or Unknown at the governing dates). Annotation dates outside the image
        date range are ignored; with none left every label is Unknown.
        """
        if not label_maps:
            raise ConfigurationError("At least one annotation date is required for propagation")
        if not image_dates:
            raise ConfigurationError("At least one image date is required for propagation")

        maps = sorted(label_maps, key=lambda m: m.date)
        annotation_dates = [m.date for m in maps]
        if len(set(annotation_dates)) != len(annotation_dates):
            raise ConfigurationError("Duplicate annotation dates passed to propagate")
        mask = np.logical_or.reduce([m.mask for m in maps])
        first, last = min(image_dates), max(image_dates)
        outside = [d for d in annotation_dates if not first <= d <= last]
        if outside:
            logger.warning(
                f"{city_id}: ignoring annotation dates {', '.join(map(str, outside))} outside "
                f"the image date range {first}..{last}"
            )
            maps = [m for m in maps if first <= m.date <= last]
            annotation_dates = [m.date for m in maps]
        codes = np.full((len(image_dates),) + mask.shape, LabelClass.UNKNOWN, dtype=np.int8)
        if not maps:
            return LabelPanel(city_id=city_id, image_dates=list(image_dates), annotation_dates=[],
                              codes=codes, mask=mask)

        timeline = np.stack([m.codes for m in maps]).astype(np.int8)

        # once destroyed, destroyed at every later annotation date
        ever_destroyed = np.logical_or.accumulate(timeline == LabelClass.DESTROYED, axis=0)
        timeline[ever_destroyed] = LabelClass.DESTROYED

        ann_ordinals = np.array([d.toordinal() for d in annotation_dates])
        for t, when in enumerate(image_dates):
            ordinal = when.toordinal()
            prev_index = int(np.searchsorted(ann_ordinals, ordinal, side="right")) - 1
            next_index = int(np.searchsorted(ann_ordinals, ordinal, side="left"))

            layer = codes[t]
            if next_index < len(maps):
                layer[timeline[next_index] == LabelClass.INTACT] = LabelClass.INTACT
            if prev_index >= 0:
                layer[timeline[prev_index] == LabelClass.DESTROYED] = LabelClass.DESTROYED
            layer[~mask] = LabelClass.UNKNOWN

        return LabelPanel(
            city_id=city_id,
            image_dates=list(image_dates),
            annotation_dates=annotation_dates,
            codes=codes,
            mask=mask
        )

    def build_label_panel(
        self,
        grid: PatchGrid,
        raster: GeoRaster,
        annotations: Sequence[Annotation],
        image_dates: Sequence[date],
        annotation_dates: Optional[Sequence[date]] = None,
        binding: AnnotationBinding = AnnotationBinding.EXACT
    ) -> LabelPanel:
        """Merge annotations per annotation date and propagate over the image dates"""
        bound = self.bind_annotation_dates(annotations, image_dates, binding)
        groups = self.group_by_date(bound)
        declared = list(annotation_dates) if annotation_dates is not None else list(groups)
        if binding == AnnotationBinding.NEAREST and annotation_dates is not None:
            declared = sorted({a.date for a in self.bind_annotation_dates(
                [Annotation(lonlat=(0.0, 0.0), date=d, damage_class=DamageClass.DESTROYED) for d in declared],
                image_dates, binding
            )})
        for when in groups:
            if when not in declared:
                raise ConfigurationError(f"Annotation date {when} is not a declared annotation date")

        label_maps = [
            self.label_at_annotation_date(grid, raster, groups.get(when, []), when, declared)
            for when in declared
        ]
        panel = self.propagate(label_maps, image_dates, city_id=grid.city_id)
        logger.info(
            f"Label panel for {grid.city_id}: {len(declared)} annotation dates, "
            f"{panel.labeled_count()} labeled samples, {panel.destroyed_count()} destroyed"
        )
        return panel

    def split_patches(
        self,
        patch_ids: Iterable[PatchId],
        train_fraction: float = 0.7,
        seed: int = 0
    ) -> SplitAssignment:
        """Seeded hash split: the assignment depends only on the patch id and the seed"""
        assignment = {
            (int(row), int(col)): (
                SplitName.TRAIN if self.hash_unit((seed, row, col)) < train_fraction else SplitName.TEST
            )
            for row, col in patch_ids
        }
        return SplitAssignment(assignment=assignment, train_fraction=train_fraction, seed=seed)

    def hash_unit(self, key) -> float:
        """Map a key to [0, 1) with blake2b"""
        digest = hashlib.blake2b(repr(tuple(key)).encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") / 2.0 ** 64

    def balance_training_set(self, samples: Sequence[LabeledSample]) -> List[LabeledSample]:
        """
        Drop Unknown samples and replicate the minority class round-robin until the
        classes are 1:1.
        """
        positives = [s for s in samples if s.label == LabelClass.DESTROYED]
        negatives = [s for s in samples if s.label == LabelClass.INTACT]
        if not positives or not negatives:
            raise ClassError(
                f"Balancing needs both classes, got {len(positives)} destroyed and {len(negatives)} intact"
            )
        if len(positives) == len(negatives):
            return [s for s in samples if s.label != LabelClass.UNKNOWN]
        if len(positives) < len(negatives):
            minority, majority = positives, negatives
        else:
            minority, majority = negatives, positives
        upsampled = [minority[i % len(minority)] for i in range(len(majority))]
        return majority + upsampled

    def labeled_samples(
        self,
        panel: LabelPanel,
        split: SplitAssignment,
        which: SplitName,
        patch_filter: Optional[Iterable[PatchId]] = None
    ) -> List[LabeledSample]:
        """Non-Unknown (patch, date) samples of one split"""
        allowed = set(split.ids(which))
        if patch_filter is not None:
            allowed &= set(patch_filter)
        samples = []
        for row, col in sorted(allowed):
            if not panel.mask[row, col]:
                continue
            column = panel.codes[:, row, col]
            for t in np.nonzero(column != LabelClass.UNKNOWN)[0]:
                samples.append(LabeledSample(
                    key=SampleKey(panel.city_id, int(row), int(col), int(t)),
                    label=LabelClass(int(column[t]))
                ))
        return samples

    def label_summary(self, panel: LabelPanel) -> Dict[str, float]:
        labeled = panel.labeled_count()
        destroyed = panel.destroyed_count()
        return {
            "labeled_samples": labeled,
            "destroyed_samples": destroyed,
            "share_destroyed": destroyed / labeled if labeled else 0.0,
        }


label_service = LabelService()
