"""Check-in data model, ingestion, temporal splitting and synthesis.

A Dataset holds POIs and per-user trajectories (ascending by timestamp;
prompt builders render newest-first where needed). Interactions are
addressed by a canonical global index: users in sorted order, then
trajectory position. Split tags, when present, align to that index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterator

import numpy as np

from .geo import GeoPoint, geohash_encode

ACTIONS = ("click", "navigate", "book", "reserve", "collect", "checkin")
SPLIT_TAGS = ("train", "valid", "test")

# 2-decimal coordinate buckets (~1.1 km) match geohash-precision-5 granularity
COORD_BUCKET_DECIMALS = 2
GEOHASH_FEATURE_PRECISION = 5
POI_GEOHASH_PRECISION = 8


@dataclass(frozen=True)
class Context:
    query: str | None = None
    lat: float | None = None
    lon: float | None = None
    weather: str | None = None

    def __post_init__(self) -> None:
        if (self.lat is None) != (self.lon is None):
            raise ValueError("context lat and lon must be present together")
        if self.lat is not None:
            GeoPoint(self.lat, self.lon)  # range check


@dataclass(frozen=True)
class Poi:
    id: str
    name: str
    category: str
    address: str
    lat: float
    lon: float
    brand: str | None = None
    geohash: str = ""
    extras: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        point = GeoPoint(self.lat, self.lon)  # range check
        if not self.geohash:
            object.__setattr__(self, "geohash", geohash_encode(point, POI_GEOHASH_PRECISION))
        if isinstance(self.extras, dict):
            object.__setattr__(self, "extras", tuple(self.extras.items()))

    @property
    def point(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    poi_id: str
    timestamp: int
    action: str
    context: Context = field(default_factory=Context)

    def __post_init__(self) -> None:
        if self.timestamp <= 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    interactions: tuple[Interaction, ...]

    def __post_init__(self) -> None:
        if isinstance(self.interactions, list):
            object.__setattr__(self, "interactions", tuple(self.interactions))
        for inter in self.interactions:
            if inter.user_id != self.user_id:
                raise ValueError("trajectory interaction has foreign user_id")
        times = [i.timestamp for i in self.interactions]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory timestamps must be non-decreasing")


@dataclass(frozen=True)
class Dataset:
    pois: dict[str, Poi]
    trajectories: dict[str, Trajectory]
    split: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        for traj in self.trajectories.values():
            for inter in traj.interactions:
                if inter.poi_id not in self.pois:
                    raise ValueError(f"interaction references unknown POI {inter.poi_id!r}")
        if self.split is not None and len(self.split) != self.n_interactions:
            raise ValueError("split length does not match interaction count")

    @property
    def n_interactions(self) -> int:
        return sum(len(t.interactions) for t in self.trajectories.values())

    def iter_interactions(self) -> Iterator[tuple[int, Interaction]]:
        """Interactions in canonical global order: sorted user, then time."""
        idx = 0
        for user in sorted(self.trajectories):
            for inter in self.trajectories[user].interactions:
                yield idx, inter
                idx += 1

    def tagged(self, tag: str) -> list[Interaction]:
        if self.split is None:
            raise ValueError("dataset has no split tags")
        return [inter for idx, inter in self.iter_interactions() if self.split[idx] == tag]

    def user_interactions(self, user_id: str, tag: str | None = None) -> list[Interaction]:
        """One user's interactions in time order, optionally filtered by split tag."""
        if tag is None:
            return list(self.trajectories[user_id].interactions)
        tags = self.user_split_tags(user_id)
        traj = self.trajectories[user_id].interactions
        return [inter for i, inter in enumerate(traj) if tags[i] == tag]

    def user_split_tags(self, user_id: str) -> list[str]:
        """Split tags aligned with one user's trajectory positions."""
        if self.split is None:
            raise ValueError("dataset has no split tags")
        base = self._user_offsets()[user_id]
        return [self.split[base + i] for i in range(len(self.trajectories[user_id].interactions))]

    def _user_offsets(self) -> dict[str, int]:
        cached = getattr(self, "_offsets_cache", None)
        if cached is None:
            cached = {}
            idx = 0
            for user in sorted(self.trajectories):
                cached[user] = idx
                idx += len(self.trajectories[user].interactions)
            object.__setattr__(self, "_offsets_cache", cached)
        return cached


def _build_trajectories(interactions: list[Interaction]) -> dict[str, Trajectory]:
    by_user: dict[str, list[Interaction]] = {}
    for inter in interactions:
        by_user.setdefault(inter.user_id, []).append(inter)
    out = {}
    for user, inters in by_user.items():
        inters.sort(key=lambda r: r.timestamp)
        out[user] = Trajectory(user_id=user, interactions=tuple(inters))
    return out


# ---------------------------------------------------------------------------
# Ingestion: Foursquare-style check-in TSV
# ---------------------------------------------------------------------------

_CHECKIN_TIME_FORMAT = "%a %b %d %H:%M:%S %z %Y"


def load_checkins_tsv(path: str | Path) -> Dataset:
    """Load an 8-column check-in TSV (user, venue, category id/name, lat,
    lon, tz offset, UTC time) into a Dataset of checkin interactions.

    Venue rows become one Poi per distinct venue_id with the category name
    doubling as the display name. Consecutive duplicate (user, poi, time)
    rows are collapsed.
    """
    path = Path(path)
    pois: dict[str, Poi] = {}
    interactions: list[Interaction] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 8:
                raise ValueError(f"line {lineno}: expected 8 tab-separated fields, got {len(fields)}")
            user_id, venue_id, _category_id, category_name, lat_s, lon_s, _tz, time_s = fields
            try:
                lat = float(lat_s)
                lon = float(lon_s)
            except ValueError:
                raise ValueError(f"line {lineno}: unparseable coordinates {lat_s!r}, {lon_s!r}") from None
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise ValueError(f"line {lineno}: coordinate out of range ({lat}, {lon})")
            try:
                ts = int(datetime.strptime(time_s, _CHECKIN_TIME_FORMAT).timestamp())
            except ValueError:
                raise ValueError(f"line {lineno}: unparseable timestamp {time_s!r}") from None
            if venue_id not in pois:
                pois[venue_id] = Poi(
                    id=venue_id, name=category_name, category=category_name,
                    address="", lat=lat, lon=lon,
                )
            interactions.append(Interaction(user_id=user_id, poi_id=venue_id, timestamp=ts, action="checkin"))
    if not interactions:
        raise ValueError(f"empty check-in file: {path}")
    deduped: list[Interaction] = []
    last_by_user: dict[str, tuple[str, int]] = {}
    for inter in interactions:
        key = (inter.poi_id, inter.timestamp)
        if last_by_user.get(inter.user_id) == key:
            continue
        last_by_user[inter.user_id] = key
        deduped.append(inter)
    return Dataset(pois=pois, trajectories=_build_trajectories(deduped))


# ---------------------------------------------------------------------------
# Temporal split
# ---------------------------------------------------------------------------

def split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = math.floor(fractions[0] * n)
    n_valid = math.floor(fractions[1] * n)
    return n_train, n_valid, n - n_train - n_valid


def temporal_split(ds: Dataset, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Dataset:
    """Tag interactions train/valid/test by global timestamp order.

    The first floor(f_train * n) globally-earliest interactions are train,
    the next floor(f_valid * n) are valid, and the remainder test. Ties
    keep canonical order, so each user's tags are temporally consistent.
    """
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = ds.n_interactions
    if n < 3:
        raise ValueError(f"need at least 3 interactions to split, got {n}")
    times = _timestamps(ds)
    order = sorted(range(n), key=lambda i: (times[i], i))
    n_train, n_valid, _ = split_counts(n, fractions)
    tags = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_valid:
            tags[idx] = "valid"
        else:
            tags[idx] = "test"
    return replace(ds, split=tuple(tags))


def _timestamps(ds: Dataset) -> list[int]:
    return [inter.timestamp for _, inter in ds.iter_interactions()]


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------

def featurize_poi(p: Poi) -> list[str]:
    """Deterministic attribute tokens for one POI.

    Coordinates are bucketed to 2 decimals, the geohash truncated to 5
    characters; name and address contribute one token per whitespace word.
    """
    tokens = [
        f"LON:{p.lon:.{COORD_BUCKET_DECIMALS}f}",
        f"LAT:{p.lat:.{COORD_BUCKET_DECIMALS}f}",
        f"GEO:{p.geohash[:GEOHASH_FEATURE_PRECISION]}",
    ]
    if p.category:
        tokens.append(f"CAT:{p.category}")
    tokens.extend(f"NAME:{w}" for w in p.name.split())
    tokens.extend(f"ADDR:{w}" for w in p.address.split())
    tokens.extend(f"{k.upper()}:{v}" for k, v in p.extras)
    return tokens


# ---------------------------------------------------------------------------
# Synthetic data with planted spatial/behavioral structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_hubs: int
    pois_per_hub: int
    n_users: int
    visits_per_user: int
    hub_radius_km: float
    seed: int

    def __post_init__(self) -> None:
        for name in ("n_hubs", "pois_per_hub", "n_users", "visits_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hub_radius_km <= 0:
            raise ValueError("hub_radius_km must be positive")


_SYNTH_CATEGORIES = (
    "Coffee Shop", "Gym", "Office", "Park", "Restaurant", "Bar",
    "Supermarket", "Hotel", "Museum", "Cinema", "Pharmacy", "Bakery",
)
_SYNTH_WEATHER = ("sunny", "rainy", "cloudy", "snowy")
_SYNTH_BASE_LAT = 40.0
_SYNTH_BASE_LON = 116.0
_SYNTH_BOX_KM = 100.0
_KM_PER_DEG_LAT = math.pi * 6371.0088 / 180.0
_SYNTH_EPOCH = 1_600_000_000  # fixed start time

# transition behavior planted into user sequences
_P_STAY_HUB = 0.85
_P_FAVORITE = 0.65
_FAVORITES_PER_HUB = 12
_ACTION_WEIGHTS = (0.35, 0.2, 0.05, 0.05, 0.05, 0.3)


def synthesize_dataset(spec: SynthSpec) -> Dataset:
    """Generate a seeded dataset of hub-clustered POIs and hub-loyal users.

    Hubs are scattered in a 100 km box; each POI sits within hub_radius_km
    of its hub and inherits a hub-skewed category. Users get 2-3 home hubs
    and, per hub, a small favorite subset they mostly revisit; sequences
    stay within the current hub most steps. This plants the co-visit
    structure that pair mining and contrastive refinement must recover,
    and the repetition that makes next-POI prediction learnable.
    """
    rng = np.random.default_rng(spec.seed)
    km_per_deg_lon = _KM_PER_DEG_LAT * math.cos(math.radians(_SYNTH_BASE_LAT + 0.45))

    hub_lat = _SYNTH_BASE_LAT + rng.uniform(0, _SYNTH_BOX_KM, spec.n_hubs) / _KM_PER_DEG_LAT
    hub_lon = _SYNTH_BASE_LON + rng.uniform(0, _SYNTH_BOX_KM, spec.n_hubs) / km_per_deg_lon
    hub_cats = [rng.choice(len(_SYNTH_CATEGORIES), size=3, replace=False) for _ in range(spec.n_hubs)]

    pois: dict[str, Poi] = {}
    hub_members: list[list[str]] = [[] for _ in range(spec.n_hubs)]
    for h in range(spec.n_hubs):
        n = spec.pois_per_hub
        radius = spec.hub_radius_km * np.sqrt(rng.uniform(size=n))
        theta = rng.uniform(0, 2 * math.pi, size=n)
        lat = hub_lat[h] + radius * np.sin(theta) / _KM_PER_DEG_LAT
        lon = hub_lon[h] + radius * np.cos(theta) / km_per_deg_lon
        own_cat = rng.uniform(size=n) < 0.8
        cat_pick = rng.integers(0, 3, size=n)
        cat_any = rng.integers(0, len(_SYNTH_CATEGORIES), size=n)
        streets = rng.integers(0, 20, size=n)
        prices = rng.integers(1, 4, size=n)
        for i in range(n):
            cat = _SYNTH_CATEGORIES[hub_cats[h][cat_pick[i]] if own_cat[i] else cat_any[i]]
            poi_id = f"p{h:03d}_{i:04d}"
            pois[poi_id] = Poi(
                id=poi_id,
                name=f"{cat} {i}",
                category=cat,
                address=f"hub {h} street {int(streets[i])}",
                lat=float(np.clip(lat[i], -90.0, 90.0)),
                lon=float(np.clip(lon[i], -180.0, 180.0)),
                extras=(("price", str(int(prices[i]))),),
            )
            hub_members[h].append(poi_id)

    interactions: list[Interaction] = []
    n_home = min(spec.n_hubs, 3)
    n_fav = min(_FAVORITES_PER_HUB, spec.pois_per_hub)
    for u in range(spec.n_users):
        user_id = f"u{u:04d}"
        k_home = int(rng.integers(2, n_home + 1)) if spec.n_hubs >= 2 else 1
        home_hubs = [int(h) for h in rng.choice(spec.n_hubs, size=k_home, replace=False)]
        favorites = {h: [hub_members[h][j] for j in rng.choice(spec.pois_per_hub, size=n_fav, replace=False)]
                     for h in home_hubs}
        hub = home_hubs[int(rng.integers(0, len(home_hubs)))]
        ts = _SYNTH_EPOCH + int(rng.integers(0, 86_400))
        nv = spec.visits_per_user
        switch = rng.uniform(size=nv) >= _P_STAY_HUB
        from_fav = rng.uniform(size=nv) < _P_FAVORITE
        fav_pick = rng.integers(0, n_fav, size=nv)
        any_pick = rng.integers(0, spec.pois_per_hub, size=nv)
        act_pick = rng.choice(len(ACTIONS), size=nv, p=_ACTION_WEIGHTS)
        with_query = rng.uniform(size=nv) < 0.3
        wx_pick = rng.integers(0, len(_SYNTH_WEATHER), size=nv)
        jitter = rng.normal(0, 0.002, size=(nv, 2))
        gaps = rng.integers(1_800, 14_400, size=nv)
        for v in range(nv):
            if switch[v] and len(home_hubs) > 1:
                others = [h for h in home_hubs if h != hub]
                hub = others[int(rng.integers(0, len(others)))]
            if from_fav[v]:
                poi_id = favorites[hub][fav_pick[v] % n_fav]
            else:
                poi_id = hub_members[hub][any_pick[v]]
            poi = pois[poi_id]
            ctx = Context(
                query=poi.category.lower() if with_query[v] else None,
                lat=float(np.clip(poi.lat + jitter[v, 0], -90.0, 90.0)),
                lon=float(np.clip(poi.lon + jitter[v, 1], -180.0, 180.0)),
                weather=_SYNTH_WEATHER[wx_pick[v]],
            )
            interactions.append(Interaction(user_id=user_id, poi_id=poi_id, timestamp=ts,
                                            action=ACTIONS[act_pick[v]], context=ctx))
            ts += int(gaps[v])
    return Dataset(pois=pois, trajectories=_build_trajectories(interactions))


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    """Write pois.jsonl, interactions.jsonl and split.json under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "pois.jsonl").open("w", encoding="utf-8") as fh:
        for poi_id in sorted(ds.pois):
            p = ds.pois[poi_id]
            fh.write(json.dumps({
                "id": p.id, "name": p.name, "category": p.category, "brand": p.brand,
                "address": p.address, "lat": p.lat, "lon": p.lon, "geohash": p.geohash,
                "extras": dict(p.extras),
            }, ensure_ascii=False) + "\n")
    with (out / "interactions.jsonl").open("w", encoding="utf-8") as fh:
        for _, inter in ds.iter_interactions():
            c = inter.context
            fh.write(json.dumps({
                "user_id": inter.user_id, "poi_id": inter.poi_id,
                "timestamp": inter.timestamp, "action": inter.action,
                "context": {"query": c.query, "lat": c.lat, "lon": c.lon, "weather": c.weather},
            }, ensure_ascii=False) + "\n")
    split = {} if ds.split is None else {str(i): tag for i, tag in enumerate(ds.split)}
    (out / "split.json").write_text(json.dumps(split, indent=0, sort_keys=True), encoding="utf-8")


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    pois: dict[str, Poi] = {}
    with (src / "pois.jsonl").open("r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            pois[rec["id"]] = Poi(
                id=rec["id"], name=rec["name"], category=rec["category"],
                address=rec["address"], lat=rec["lat"], lon=rec["lon"],
                brand=rec.get("brand"), geohash=rec.get("geohash", ""),
                extras=tuple((k, v) for k, v in rec.get("extras", {}).items()),
            )
    interactions: list[Interaction] = []
    with (src / "interactions.jsonl").open("r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            ctx = rec.get("context") or {}
            interactions.append(Interaction(
                user_id=rec["user_id"], poi_id=rec["poi_id"],
                timestamp=rec["timestamp"], action=rec["action"],
                context=Context(query=ctx.get("query"), lat=ctx.get("lat"),
                                lon=ctx.get("lon"), weather=ctx.get("weather")),
            ))
    split = None
    split_path = src / "split.json"
    if split_path.exists():
        raw = json.loads(split_path.read_text(encoding="utf-8"))
        if raw:
            split = tuple(raw[str(i)] for i in range(len(raw)))
    ds = Dataset(pois=pois, trajectories=_build_trajectories(interactions), split=split)
    return ds
