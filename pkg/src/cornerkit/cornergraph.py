"""Corner-kick data model: player schema, reflection group, dataset files.

A corner is a fully connected graph over the 22 on-pitch players at the
moment the kick is taken.  Positions live on a normalized 10m x 10m pitch
(coordinates in [-5, 5], zero-centered), velocities are rescaled by the same
per-axis factors, heights are meters and weights are 100 kg units.

Node ordering convention: indices 0-10 attacking with index 0 the kicker,
11-21 defending.  The encoders are permutation-equivariant, so the ordering
only pins down serialization (receiver one-hots, checkpoints).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

ATTACKING = "attacking"
DEFENDING = "defending"

PLAYERS_PER_TEAM = 11
NUM_PLAYERS = 2 * PLAYERS_PER_TEAM

DEFAULT_PITCH_LENGTH = 110.0
DEFAULT_PITCH_WIDTH = 63.0
DEFAULT_HEIGHT = 1.80   # raw 180 cm / 100
DEFAULT_WEIGHT = 0.75   # raw 75 kg / 100

# node feature layout (k = 8)
FEATURES_PER_PLAYER = 8
FEATURE_NAMES = ("x", "y", "vx", "vy", "height", "weight", "has_ball", "is_attacking")


class CornerGraphError(ValueError):
    """A corner record violates the data-model contract."""


@dataclass(frozen=True)
class PlayerNode:
    """One player at kick time, in normalized units."""

    x: float
    y: float
    vx: float
    vy: float
    height: float
    weight: float
    has_ball: int
    team: str

    def __post_init__(self):
        if self.team not in (ATTACKING, DEFENDING):
            raise CornerGraphError(f"unknown team {self.team!r}")
        if self.has_ball not in (0, 1):
            raise CornerGraphError(f"has_ball must be 0/1, got {self.has_ball!r}")
        if not (self.height > 0 and self.weight > 0):
            raise CornerGraphError(
                f"height/weight must be positive, got {self.height}/{self.weight}")


@dataclass(frozen=True)
class CornerGraph:
    """One corner-kick situation with optional task labels.

    Immutable after construction; safe to share across threads.  The edge
    set is always V x V including self-loops, with a teammate/opponent
    one-hot per edge (self-edges count as teammate).
    """

    players: tuple
    id: str = ""
    receiver_index: int | None = None
    shot_taken: int | None = None

    def __post_init__(self):
        if len(self.players) != NUM_PLAYERS:
            raise CornerGraphError(
                f"expected {NUM_PLAYERS} players, got {len(self.players)}")
        n_att = sum(1 for p in self.players if p.team == ATTACKING)
        if n_att != PLAYERS_PER_TEAM:
            raise CornerGraphError(
                f"expected {PLAYERS_PER_TEAM} attacking players, got {n_att}")
        holders = [i for i, p in enumerate(self.players) if p.has_ball == 1]
        if len(holders) != 1:
            raise CornerGraphError(f"expected exactly one ball holder, got {holders}")
        if self.players[holders[0]].team != ATTACKING:
            raise CornerGraphError("the ball holder must be on the attacking team")
        if self.receiver_index is not None and not 0 <= self.receiver_index < NUM_PLAYERS:
            raise CornerGraphError(f"receiver_index out of range: {self.receiver_index}")
        if self.shot_taken is not None and self.shot_taken not in (0, 1):
            raise CornerGraphError(f"shot_taken must be 0/1, got {self.shot_taken!r}")

    # -- dense views -----------------------------------------------------

    def node_features(self, dtype=np.float64):
        """(22, 8) array in the FEATURE_NAMES layout."""
        out = np.empty((NUM_PLAYERS, FEATURES_PER_PLAYER), dtype=dtype)
        for i, p in enumerate(self.players):
            out[i] = (p.x, p.y, p.vx, p.vy, p.height, p.weight,
                      p.has_ball, 1.0 if p.team == ATTACKING else 0.0)
        return out

    def team_matrix(self):
        """(22, 22) boolean teammate matrix (self-edges are teammate)."""
        att = np.array([p.team == ATTACKING for p in self.players])
        return att[:, None] == att[None, :]

    def edge_features(self, dtype=np.float64):
        """(22, 22, 2) one-hot (teammate, opponent) for every ordered pair."""
        same = self.team_matrix()
        out = np.zeros((NUM_PLAYERS, NUM_PLAYERS, 2), dtype=dtype)
        out[..., 0] = same
        out[..., 1] = ~same
        return out

    def kicker_index(self):
        return next(i for i, p in enumerate(self.players) if p.has_ball == 1)

    def receiver_onehot(self, dtype=np.float64):
        if self.receiver_index is None:
            raise CornerGraphError(f"corner {self.id!r} has no receiver label")
        out = np.zeros(NUM_PLAYERS, dtype=dtype)
        out[self.receiver_index] = 1.0
        return out


# -- D2 reflection group -----------------------------------------------------


class D2Element(IntEnum):
    """Pitch reflections; the bits encode (flip x, flip y), compose by XOR."""

    ID = 0
    FLIP_H = 1   # negate x of positions and velocities
    FLIP_V = 2   # negate y of positions and velocities
    FLIP_HV = 3

    @property
    def sign_x(self):
        return -1.0 if self & 1 else 1.0

    @property
    def sign_y(self):
        return -1.0 if self & 2 else 1.0


D2 = (D2Element.ID, D2Element.FLIP_H, D2Element.FLIP_V, D2Element.FLIP_HV)


def compose(g: D2Element, h: D2Element) -> D2Element:
    """Group composition; every element is its own inverse."""
    return D2Element(g ^ h)


def apply(g: D2Element, corner: CornerGraph) -> CornerGraph:
    """Reflect positions and velocities; everything else is untouched."""
    if g is D2Element.ID:
        return corner
    sx, sy = g.sign_x, g.sign_y
    players = tuple(replace(p, x=sx * p.x, y=sy * p.y, vx=sx * p.vx, vy=sy * p.vy)
                    for p in corner.players)
    return replace(corner, players=players)


def apply_to_features(g: D2Element, features: np.ndarray) -> np.ndarray:
    """Reflect a (..., 22, 8) feature array; exact sign flips, no rounding."""
    out = features.copy()
    if g & 1:
        out[..., 0] *= -1.0
        out[..., 2] *= -1.0
    if g & 2:
        out[..., 1] *= -1.0
        out[..., 3] *= -1.0
    return out


def klein_sum(by_element):
    """Order-canonical sum over the four D2-indexed terms.

    ((id + hv) + (h + v)) is bit-exactly unchanged when the four terms are
    relabeled by any group element, because each reflection swaps the terms
    within the pairs or swaps the pairs, and two-operand float addition is
    commutative.  This makes frame-averaged outputs exactly reflection
    invariant instead of merely within rounding.
    """
    return ((by_element[D2Element.ID] + by_element[D2Element.FLIP_HV])
            + (by_element[D2Element.FLIP_H] + by_element[D2Element.FLIP_V]))


# -- normalization ------------------------------------------------------------


def normalize(raw_positions, raw_velocities, teams, has_ball, profiles=None,
              pitch_length=None, pitch_width=None, graph_id="",
              receiver_index=None, shot_taken=None) -> CornerGraph:
    """Build a normalized corner from raw meter-scale records.

    `raw_positions` (22, 2) are meters in the [0, length] x [0, width] frame;
    they are zero-centered at the pitch center and scaled by (10/length,
    10/width); velocities (m/s) are scaled by the same per-axis factors.
    `profiles` holds per-player (height_cm, weight_kg), either entry None for
    missing (defaults 180 cm / 75 kg); both are downscaled by 100.
    """
    raw_positions = np.asarray(raw_positions, dtype=np.float64)
    raw_velocities = np.asarray(raw_velocities, dtype=np.float64)
    if raw_positions.shape != (NUM_PLAYERS, 2):
        raise CornerGraphError(
            f"expected {NUM_PLAYERS} raw player records, got {raw_positions.shape[0]}")
    if raw_velocities.shape != (NUM_PLAYERS, 2):
        raise CornerGraphError(
            f"expected {NUM_PLAYERS} velocity records, got {raw_velocities.shape[0]}")
    length = DEFAULT_PITCH_LENGTH if pitch_length is None else float(pitch_length)
    width = DEFAULT_PITCH_WIDTH if pitch_width is None else float(pitch_width)
    if length <= 0 or width <= 0:
        raise CornerGraphError(f"pitch dimensions must be positive: {length} x {width}")
    fx, fy = 10.0 / length, 10.0 / width
    players = []
    for i in range(NUM_PLAYERS):
        h_cm = w_kg = None
        if profiles is not None and profiles[i] is not None:
            h_cm, w_kg = profiles[i]
        players.append(PlayerNode(
            x=(raw_positions[i, 0] - length / 2.0) * fx,
            y=(raw_positions[i, 1] - width / 2.0) * fy,
            vx=raw_velocities[i, 0] * fx,
            vy=raw_velocities[i, 1] * fy,
            height=DEFAULT_HEIGHT if h_cm is None else float(h_cm) / 100.0,
            weight=DEFAULT_WEIGHT if w_kg is None else float(w_kg) / 100.0,
            has_ball=int(has_ball[i]),
            team=teams[i],
        ))
    return CornerGraph(players=tuple(players), id=graph_id,
                       receiver_index=receiver_index, shot_taken=shot_taken)


# -- dataset files -------------------------------------------------------------

_PLAYER_FIELDS = ("x", "y", "vx", "vy", "height", "weight", "has_ball", "team")


def corner_to_record(corner: CornerGraph) -> dict:
    """Plain-dict form of a corner; also the HTTP wire shape."""
    record = {
        "id": corner.id,
        "players": [{f: getattr(p, f) for f in _PLAYER_FIELDS} for p in corner.players],
    }
    if corner.receiver_index is not None:
        record["receiver_index"] = corner.receiver_index
    if corner.shot_taken is not None:
        record["shot_taken"] = corner.shot_taken
    return record


def corner_from_record(record: dict, where="record") -> CornerGraph:
    """Inverse of corner_to_record with field-level validation."""
    if not isinstance(record, dict):
        raise CornerGraphError(f"{where}: expected an object")
    players_raw = record.get("players")
    if not isinstance(players_raw, list) or len(players_raw) != NUM_PLAYERS:
        got = len(players_raw) if isinstance(players_raw, list) else type(players_raw).__name__
        raise CornerGraphError(f"{where}: field 'players' must list {NUM_PLAYERS} players, got {got}")
    players = []
    for i, praw in enumerate(players_raw):
        for f in _PLAYER_FIELDS:
            if f not in praw:
                raise CornerGraphError(f"{where}: players[{i}] missing field '{f}'")
        numeric = {f: praw[f] for f in ("x", "y", "vx", "vy", "height", "weight")}
        for f, v in numeric.items():
            if not isinstance(v, (int, float)) or not np.isfinite(v):
                raise CornerGraphError(f"{where}: players[{i}].{f} is not a finite number")
        try:
            players.append(PlayerNode(has_ball=praw["has_ball"], team=praw["team"], **numeric))
        except CornerGraphError as e:
            raise CornerGraphError(f"{where}: players[{i}]: {e}") from None
    try:
        return CornerGraph(
            players=tuple(players),
            id=str(record.get("id", "")),
            receiver_index=record.get("receiver_index"),
            shot_taken=record.get("shot_taken"),
        )
    except CornerGraphError as e:
        raise CornerGraphError(f"{where}: {e}") from None


def write_dataset(path, corners):
    """One JSON record per line; floats keep full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for corner in corners:
            fh.write(json.dumps(corner_to_record(corner)) + "\n")


def read_dataset(path):
    """Parse a dataset file, naming the line and field of any bad record."""
    corners = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CornerGraphError(f"line {lineno}: invalid JSON ({e.msg})") from None
            corners.append(corner_from_record(record, where=f"line {lineno}"))
    return corners


def split(corners, ratio=0.8, seed=0):
    """Deterministic disjoint, exhaustive train/test partition."""
    if not corners:
        raise CornerGraphError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(corners))
    n_train = int(round(len(corners) * ratio))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return ([corners[i] for i in train_idx], [corners[i] for i in test_idx])
