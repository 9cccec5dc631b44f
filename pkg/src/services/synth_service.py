from datetime import date, timedelta
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import ConfigurationError
from src.logging.logger import get_logger
from src.schemas.events import EventRecord
from src.schemas.labels import Annotation, DamageClass, LabelClass, LabelPanel
from src.schemas.raster import AOIKind, AreaOfInterest, GeoRaster, GeoReference, PatchGrid
from src.schemas.synth import Building, CityModel, Rect, RenderSpec

logger = get_logger(__name__)

STRIP_ROWS = 256
GROUND = np.array([152.0, 140.0, 118.0], dtype=np.float32)
STREET = np.array([86.0, 86.0, 92.0], dtype=np.float32)
PARK = np.array([72.0, 116.0, 58.0], dtype=np.float32)
ROOF_PALETTE = [(178, 86, 64), (214, 196, 160), (120, 135, 160), (196, 170, 120)]
# stream tags of the seeded generators
GROUND_STREAM, RUBBLE_STREAM, LIGHT_STREAM, NOISE_STREAM, ROOF_STREAM = range(1, 6)


class SynthService:
    """Procedural multi-date city imagery with a known destruction schedule"""

    def generate_city(
        self,
        extent: int,
        building_density: float,
        destruction_share: float,
        seed: int,
        date_count: int = 22,
        clustered: bool = True,
        cell_size: int = 32,
        no_analysis_zone: bool = False,
        city_id: str = "synth",
        geo: Optional[GeoReference] = None
    ) -> CityModel:
        """
        Buildings sit one per lattice cell, jittered inside the cell, so footprints never overlap.
        Every fourth lattice row and column is a street; a few cell blocks are parks.
        """
        if not 0.0 <= destruction_share <= 1.0:
            raise ConfigurationError(f"destruction_share must lie in [0, 1], got {destruction_share}")
        if not 0.0 < building_density <= 1.0:
            raise ConfigurationError(f"building_density must lie in (0, 1], got {building_density}")
        if cell_size < 24:
            raise ConfigurationError(f"cell_size {cell_size} leaves no room for a building footprint")
        cells_per_side = extent // cell_size
        if cells_per_side < 1:
            raise ConfigurationError(f"Extent {extent}px holds no {cell_size}px lattice cell")

        rng = np.random.default_rng(seed)

        # 1. Street lattice
        streets = []
        street_cells = set()
        for index in range(cells_per_side):
            if index % 4 == 3:
                streets.append(Rect(row0=index * cell_size, col0=0, row1=(index + 1) * cell_size,
                                    col1=cells_per_side * cell_size))
                streets.append(Rect(row0=0, col0=index * cell_size, row1=cells_per_side * cell_size,
                                    col1=(index + 1) * cell_size))
                street_cells |= {(index, j) for j in range(cells_per_side)}
                street_cells |= {(i, index) for i in range(cells_per_side)}

        # 2. Parks on 2x2 cell blocks inside street blocks
        parks, park_cells = [], set()
        blocks = (cells_per_side + 3) // 4
        for _ in range(int(round(0.04 * blocks * blocks))):
            bi, bj = int(rng.integers(0, blocks)), int(rng.integers(0, blocks))
            i0, j0 = bi * 4 + int(rng.integers(0, 2)), bj * 4 + int(rng.integers(0, 2))
            cells = {(i, j) for i in (i0, i0 + 1) for j in (j0, j0 + 1)
                     if i < cells_per_side and j < cells_per_side and (i, j) not in street_cells}
            if not cells:
                continue
            park_cells |= cells
            rows, cols = [c[0] for c in cells], [c[1] for c in cells]
            parks.append(Rect(row0=min(rows) * cell_size, col0=min(cols) * cell_size,
                              row1=(max(rows) + 1) * cell_size, col1=(max(cols) + 1) * cell_size))

        # 3. Buildings
        available = [(i, j) for i in range(cells_per_side) for j in range(cells_per_side)
                     if (i, j) not in street_cells and (i, j) not in park_cells]
        count = int(round(building_density * len(available)))
        if count == 0:
            raise ConfigurationError(
                f"Density {building_density} places no building in {len(available)} free cells of a {extent}px city"
            )
        chosen = np.sort(rng.choice(len(available), count, replace=False))
        buildings = []
        for building_id, index in enumerate(chosen):
            i, j = available[index]
            height, width = int(rng.integers(18, cell_size - 4)), int(rng.integers(18, cell_size - 4))
            dr = int(rng.integers(2, cell_size - height - 1))
            dc = int(rng.integers(2, cell_size - width - 1))
            palette = np.array(ROOF_PALETTE[int(rng.integers(0, len(ROOF_PALETTE)))])
            color = np.clip(palette + rng.integers(-10, 11, 3), 0, 255)
            buildings.append(Building(
                id=building_id,
                footprint=Rect(row0=i * cell_size + dr, col0=j * cell_size + dc,
                               row1=i * cell_size + dr + height, col1=j * cell_size + dc + width),
                base_color=tuple(int(v) for v in color),
                cell=(i, j)
            ))

        # 4. Optional no-analysis zone, aligned to 64px windows
        zone = None
        if no_analysis_zone:
            windows = extent // 64
            side = windows // 5
            if side >= 1:
                r0 = int(rng.integers(0, windows - side + 1)) * 64
                c0 = int(rng.integers(0, windows - side + 1)) * 64
                zone = Rect(row0=r0, col0=c0, row1=r0 + side * 64, col1=c0 + side * 64)
            else:
                logger.warning(f"City of {extent}px is too small for a no-analysis zone")

        # 5. Destruction schedule
        schedule = self._destruction_schedule(buildings, destruction_share, date_count, clustered, rng)

        city = CityModel(
            city_id=city_id,
            extent=extent,
            cell_size=cell_size,
            buildings=buildings,
            streets=streets,
            parks=parks,
            no_analysis_zone=zone,
            destruction_schedule=schedule,
            seed=seed,
            date_count=date_count,
            geo=geo or GeoReference(origin_lon=37.10, origin_lat=36.25, pixel_deg=5e-6)
        )
        logger.info(
            f"Synthetic city {city_id}: {extent}px, {len(buildings)} buildings, "
            f"{len(schedule)} destroyed, {len(parks)} parks"
        )
        return city

    def _destruction_schedule(
        self,
        buildings: List[Building],
        share: float,
        date_count: int,
        clustered: bool,
        rng: np.random.Generator
    ) -> Dict[int, int]:
        target = int(round(share * len(buildings)))
        if target and date_count < 2:
            logger.warning("A single date leaves no post image to destroy buildings in")
            return {}
        if not clustered:
            ids = np.sort(rng.choice(len(buildings), target, replace=False))
            dates = rng.integers(1, date_count, target)
            return {int(b): int(d) for b, d in zip(ids, dates)}

        cells = np.array([b.cell for b in buildings])
        schedule: Dict[int, int] = {}
        taken = np.zeros(len(buildings), dtype=bool)
        while len(schedule) < target:
            # cluster seed plus neighbourhood growth
            seed_id = int(rng.choice(np.flatnonzero(~taken)))
            schedule[seed_id] = int(rng.integers(1, date_count))
            taken[seed_id] = True
            members = [seed_id]
            size = int(rng.integers(4, 13))
            while len(members) < size and len(schedule) < target:
                parent = members[int(rng.integers(0, len(members)))]
                distance = np.abs(cells - cells[parent]).max(axis=1)
                candidates = np.flatnonzero((distance <= 2) & ~taken)
                if len(candidates) == 0:
                    break
                child = int(candidates[int(rng.integers(0, len(candidates)))])
                schedule[child] = min(date_count - 1, schedule[parent] + int(rng.integers(0, 3)))
                taken[child] = True
                members.append(child)
        return dict(sorted(schedule.items()))

    def render(self, city: CityModel, spec: RenderSpec, date_index: int) -> GeoRaster:
        """One dated RGB raster: deterministic per (seed, date)"""
        if not 0 <= date_index < spec.date_count:
            raise ConfigurationError(f"date_index {date_index} outside [0, {spec.date_count})")
        extent = city.extent
        light = np.random.default_rng([city.seed, LIGHT_STREAM, date_index]).uniform(-1.0, 1.0, 2)
        gain = np.float32(1.0 + spec.illumination_shift * light[0])
        offset = np.float32(60.0 * spec.illumination_shift * light[1])

        starts = np.array([b.footprint.row0 for b in city.buildings])
        ends = np.array([b.footprint.row1 for b in city.buildings])
        footprints: Dict[int, np.ndarray] = {}
        pixels = np.empty((extent, extent, 3), dtype=np.uint8)

        for strip, r0 in enumerate(range(0, extent, STRIP_ROWS)):
            r1 = min(r0 + STRIP_ROWS, extent)
            texture = np.random.default_rng([city.seed, GROUND_STREAM, strip]).integers(
                -12, 13, (r1 - r0, extent, 1)
            ).astype(np.float32)
            canvas = GROUND + texture
            for rect in city.streets:
                self._fill(canvas, rect, r0, r1, STREET + texture * 0.4)
            for rect in city.parks:
                self._fill(canvas, rect, r0, r1, PARK + texture)

            for building_id in np.flatnonzero((ends > r0) & (starts < r1)):
                building = city.buildings[int(building_id)]
                if building.id not in footprints:
                    destroyed = city.is_destroyed(building.id, date_index)
                    footprints[building.id] = self._draw_building(city, spec, building, destroyed)
                self._paste(canvas, building.footprint, r0, r1, footprints[building.id])

            canvas = canvas * gain + offset
            if spec.noise_sigma > 0:
                noise_rng = np.random.default_rng([city.seed, NOISE_STREAM, date_index, strip])
                canvas += noise_rng.standard_normal(canvas.shape, dtype=np.float32) * np.float32(spec.noise_sigma)
            pixels[r0:r1] = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)

        return GeoRaster(
            width=extent,
            height=extent,
            pixels=pixels,
            geo=city.geo,
            capture_date=city.date_of(date_index),
            city_id=city.city_id
        )

    def _draw_building(self, city: CityModel, spec: RenderSpec, building: Building, destroyed: bool) -> np.ndarray:
        f = building.footprint
        height, width = f.row1 - f.row0, f.col1 - f.col0
        if not destroyed:
            rng = np.random.default_rng([city.seed, ROOF_STREAM, building.id])
            roof = np.empty((height, width, 3), dtype=np.float32)
            roof[:] = np.array(building.base_color, dtype=np.float32)
            # ridge shading, then a shadowed bottom/right rim
            roof[:, : width // 2] += 14.0
            roof[:, width // 2:] -= 14.0
            roof[-2:, :] -= 35.0
            roof[:, -2:] -= 35.0
            roof += rng.integers(-5, 6, (height, width, 1)).astype(np.float32)
            return roof

        rng = np.random.default_rng([city.seed, RUBBLE_STREAM, building.id])
        rubble = np.full((height, width, 3), 150.0 * spec.rubble_darkening, dtype=np.float32)
        rubble += rng.integers(-20, 21, (height, width, 1)).astype(np.float32)
        for _ in range(spec.rubble_fragments):
            fh, fw = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            r, c = int(rng.integers(0, max(1, height - fh))), int(rng.integers(0, max(1, width - fw)))
            rubble[r:r + fh, c:c + fw] = float(rng.integers(140, 231))
        return rubble

    def _fill(self, canvas: np.ndarray, rect: Rect, r0: int, r1: int, color: np.ndarray) -> None:
        top, bottom = max(rect.row0, r0), min(rect.row1, r1)
        if top >= bottom:
            return
        if color.ndim == 1:
            canvas[top - r0:bottom - r0, rect.col0:rect.col1] = color
        else:
            canvas[top - r0:bottom - r0, rect.col0:rect.col1] = color[top - r0:bottom - r0, rect.col0:rect.col1]

    def _paste(self, canvas: np.ndarray, rect: Rect, r0: int, r1: int, tile: np.ndarray) -> None:
        top, bottom = max(rect.row0, r0), min(rect.row1, r1)
        if top >= bottom:
            return
        canvas[top - r0:bottom - r0, rect.col0:rect.col1] = tile[top - rect.row0:bottom - rect.row0]

    def pixel_to_lonlat(self, city: CityModel, row: float, col: float) -> Tuple[float, float]:
        lon, lat = city.geo.transform * (col, row)
        return float(lon), float(lat)

    def annotated_buildings(self, city: CityModel) -> List[int]:
        """Destroyed buildings outside the no-analysis zone"""
        zone = city.no_analysis_zone
        return [b for b in city.destruction_schedule
                if zone is None or not zone.contains(*city.building(b).centroid)]

    def emit_annotations(self, city: CityModel, spec: RenderSpec) -> List[Annotation]:
        """At each annotation date, one Destroyed point per building destroyed on or before it"""
        annotations = []
        annotated = self.annotated_buildings(city)
        for index in spec.annotation_date_indices:
            when = city.date_of(index)
            for building_id in annotated:
                if city.destruction_schedule[building_id] <= index:
                    row, col = city.building(building_id).centroid
                    annotations.append(Annotation(
                        lonlat=self.pixel_to_lonlat(city, row, col),
                        date=when,
                        damage_class=DamageClass.DESTROYED
                    ))
        return annotations

    def annotation_dates(self, city: CityModel, spec: RenderSpec) -> List[date]:
        return [city.date_of(index) for index in spec.annotation_date_indices]

    def ground_truth_panel(
        self,
        city: CityModel,
        grid: PatchGrid,
        image_dates: Optional[Sequence[date]] = None
    ) -> LabelPanel:
        """Destroyed at t iff a building destroyed by t has its centroid in the window; no Unknowns"""
        dates = list(image_dates) if image_dates is not None else city.image_dates()[1:]
        index_of = {d: i for i, d in enumerate(city.image_dates())}
        mask = grid.included_mask()
        codes = np.zeros((len(dates),) + mask.shape, dtype=np.int8)
        for building_id, destroyed_at in city.destruction_schedule.items():
            row, col = city.building(building_id).centroid
            patch = (int(row // grid.patch_size), int(col // grid.patch_size))
            if patch not in grid.included:
                continue
            for t, when in enumerate(dates):
                if index_of[when] >= destroyed_at:
                    codes[t][patch] = LabelClass.DESTROYED
        codes[:, ~mask] = LabelClass.UNKNOWN
        return LabelPanel(
            city_id=city.city_id,
            image_dates=dates,
            annotation_dates=[],
            codes=codes,
            mask=mask
        )

    def city_aois(self, city: CityModel) -> List[AreaOfInterest]:
        """Populated area over the whole extent plus the no-analysis zone, if any"""
        def ring(rect: Rect):
            corners = [(rect.row0, rect.col0), (rect.row0, rect.col1), (rect.row1, rect.col1),
                       (rect.row1, rect.col0), (rect.row0, rect.col0)]
            return [self.pixel_to_lonlat(city, r, c) for r, c in corners]

        full = Rect(row0=0, col0=0, row1=city.extent, col1=city.extent)
        aois = [AreaOfInterest(kind=AOIKind.POPULATED_AREA, rings=[ring(full)])]
        if city.no_analysis_zone is not None:
            aois.append(AreaOfInterest(kind=AOIKind.NO_ANALYSIS_ZONE, rings=[ring(city.no_analysis_zone)]))
        return aois

    def emit_events(
        self,
        city: CityModel,
        share: float = 0.5,
        decoys: int = 10,
        seed: int = 0
    ) -> List[EventRecord]:
        """
        Strike events at a share of destroyed buildings, dated between the previous image
        and the destruction image, plus decoy strikes at random places and dates.
        """
        rng = np.random.default_rng([city.seed, seed])
        destroyed = sorted(city.destruction_schedule)
        events = []
        if destroyed:
            picked = np.sort(rng.choice(destroyed, int(round(share * len(destroyed))), replace=False))
            for building_id in picked:
                index = city.destruction_schedule[int(building_id)]
                when = city.date_of(index) - timedelta(days=int(rng.integers(0, city.date_step_days)))
                row, col = city.building(int(building_id)).centroid
                events.append(EventRecord(lonlat=self.pixel_to_lonlat(city, row, col), date=when))
        for _ in range(decoys):
            row, col = rng.uniform(0, city.extent, 2)
            when = city.date_of(int(rng.integers(1, max(2, city.date_count))))
            events.append(EventRecord(lonlat=self.pixel_to_lonlat(city, row, col), date=when))
        return events


synth_service = SynthService()
