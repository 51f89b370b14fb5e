"""Stake ledger, role election, blocks, the hash-linked chain and its on-disk form.

Hashes are SHA-256 over a canonical byte layout: fields in declaration
order, integers as 8-byte big-endian, reals as big-endian IEEE-754 binary64,
id-keyed maps sorted by id, strings length-prefixed UTF-8.
"""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import aggregation as agg
from .aggregation import LossMatrix
from .models import ConfigurationError

HASH_LEN = 32
ZERO_HASH = bytes(HASH_LEN)

# fault codes reported by validation
LINKAGE = "linkage"
HASH = "hash-integrity"
SCORES = "score-mismatch"
AGGREGATION = "aggregation-mismatch"
STRUCTURE = "structure"
ROUND = "round-sequence"
ROLES = "role-derivation"
GENESIS = "genesis"
ENCODING = "encoding"


class ProtocolFault(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    code: Optional[str] = None
    message: str = ""
    round: Optional[int] = None

    def __bool__(self):
        return self.ok


OK = ValidationResult(True)


def _fault(code, message, rnd=None) -> ValidationResult:
    return ValidationResult(False, code, message, rnd)


@dataclass(frozen=True)
class StakeLedger:
    stakes: Dict[int, float]

    def __post_init__(self):
        clean = {}
        for pid, s in self.stakes.items():
            s = float(s)
            if not (s > 0 and np.isfinite(s)):
                raise ConfigurationError(f"stake of participant {pid} must be positive")
            clean[int(pid)] = s
        if len(clean) != len(self.stakes):
            raise ConfigurationError("participant ids must be unique")
        object.__setattr__(self, "stakes", dict(sorted(clean.items())))

    @property
    def ids(self) -> List[int]:
        return list(self.stakes)

    def __len__(self):
        return len(self.stakes)


@dataclass(frozen=True)
class RoleAssignment:
    round: int
    workers: Tuple[int, ...]
    validators: Tuple[int, ...]
    miner: int

    def __post_init__(self):
        object.__setattr__(self, "workers", tuple(sorted(int(i) for i in self.workers)))
        object.__setattr__(self, "validators", tuple(sorted(int(i) for i in self.validators)))
        everyone = list(self.workers) + list(self.validators) + [self.miner]
        if len(set(everyone)) != len(everyone):
            raise ConfigurationError("roles overlap: workers, validators and miner must be disjoint")

    @property
    def participants(self) -> Tuple[int, ...]:
        return tuple(sorted(self.workers + self.validators + (self.miner,)))


def role_seed(prev_hash: bytes, round: int) -> bytes:
    return hashlib.sha256(b"sabfl/roles" + prev_hash + struct.pack(">Q", round)).digest()[:8]


def _draw(rng: np.random.Generator, ids: List[int], weights: List[float]) -> int:
    cum = np.cumsum(weights)
    u = rng.random() * cum[-1]
    pos = int(np.searchsorted(cum, u, side="right"))
    return min(pos, len(ids) - 1)


def elect_roles(ledger: StakeLedger, round: int, prev_hash: bytes, K: int, V: int) -> RoleAssignment:
    """Stake-weighted election: miner first, then V validators, without replacement.

    The generator is seeded from ``(prev_hash, round)`` so any verifier can
    re-run the election. Participants left over become workers; if more than
    K remain, K of them are picked uniformly.
    """
    if K < 1 or V < 1:
        raise ConfigurationError("need at least one worker and one validator")
    if len(ledger) < K + V + 1:
        raise ConfigurationError(
            f"{len(ledger)} participants cannot fill {K} workers, {V} validators and a miner"
        )
    rng = np.random.default_rng(int.from_bytes(role_seed(prev_hash, round), "big"))
    ids = ledger.ids
    weights = [ledger.stakes[i] for i in ids]
    picked = []
    for _ in range(V + 1):
        pos = _draw(rng, ids, weights)
        picked.append(ids.pop(pos))
        weights.pop(pos)
    if len(ids) > K:
        ids = sorted(ids[i] for i in rng.permutation(len(ids))[:K])
    return RoleAssignment(round, tuple(ids), tuple(picked[1:]), picked[0])


def apply_swaps(roles: RoleAssignment, swaps: Sequence[Tuple[int, int]]) -> RoleAssignment:
    """Exchange (validator_out, worker_in) pairs; raises on pairs that do not fit the roles."""
    workers, validators = set(roles.workers), set(roles.validators)
    for out_id, in_id in swaps:
        if out_id not in validators or in_id not in workers:
            raise ConfigurationError(f"swap ({out_id}, {in_id}) does not match the roles")
        validators.remove(out_id)
        workers.remove(in_id)
        validators.add(in_id)
        workers.add(out_id)
    return RoleAssignment(roles.round, tuple(workers), tuple(validators), roles.miner)


# ----------------------------------------------------------------- encoding

def _u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def _i64(v: int) -> bytes:
    return struct.pack(">q", v)


def _reals(a) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    return _u64(a.size) + a.astype(">f8").tobytes()


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u64(len(b)) + b


def _ids(ids) -> bytes:
    return _u64(len(ids)) + b"".join(_u64(i) for i in ids)


@dataclass(frozen=True, eq=False)
class Genesis:
    """Chain anchor: initial global weight plus everything needed to re-derive elections."""

    shape_tag: str
    initial_weight: np.ndarray
    stakes: Dict[int, float]
    K: int
    V: int

    def canonical_bytes(self) -> bytes:
        ledger = StakeLedger(self.stakes).stakes
        parts = [
            b"SABFL-GENESIS-1",
            _text(self.shape_tag),
            _reals(self.initial_weight),
            _u64(len(ledger)),
        ]
        for pid, s in ledger.items():
            parts.append(_u64(pid) + struct.pack(">d", s))
        parts += [_u64(self.K), _u64(self.V)]
        return b"".join(parts)

    @property
    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical_bytes()).digest()

    @property
    def ledger(self) -> StakeLedger:
        return StakeLedger(self.stakes)


@dataclass(frozen=True, eq=False)
class Block:
    round: int
    prev_hash: bytes
    role_seed: bytes
    roles: RoleAssignment
    worker_weights: Dict[int, np.ndarray]
    loss_matrix: LossMatrix
    scores: np.ndarray
    global_weight: np.ndarray
    aggregator: str = "softmax"
    krum_f: int = 0
    sample_sizes: Dict[int, int] = field(default_factory=dict)
    swaps: Tuple[Tuple[int, int], ...] = ()
    block_hash: bytes = ZERO_HASH

    def canonical_bytes(self) -> bytes:
        """Everything except ``block_hash``, in declaration order."""
        L = self.loss_matrix
        parts = [
            b"SABFL-BLOCK-1",
            _u64(self.round),
            self.prev_hash,
            self.role_seed,
            _u64(self.roles.round),
            _ids(self.roles.workers),
            _ids(self.roles.validators),
            _u64(self.roles.miner),
            _u64(len(self.worker_weights)),
        ]
        for wid in sorted(self.worker_weights):
            parts.append(_u64(wid) + _reals(self.worker_weights[wid]))
        parts += [
            _ids(L.validator_ids),
            _ids(L.worker_ids),
            _reals(L.entries.ravel()),
            _reals(self.scores),
            _reals(self.global_weight),
            _text(self.aggregator),
            _i64(self.krum_f),
            _u64(len(self.sample_sizes)),
        ]
        for wid in sorted(self.sample_sizes):
            parts.append(_u64(wid) + _u64(self.sample_sizes[wid]))
        parts.append(_u64(len(self.swaps)))
        for out_id, in_id in self.swaps:
            parts.append(_u64(out_id) + _u64(in_id))
        return b"".join(parts)

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_bytes()).digest()

    def rehashed(self) -> "Block":
        """Copy with ``block_hash`` recomputed (useful when deliberately tampering)."""
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields["block_hash"] = ZERO_HASH
        b = Block(**fields)
        object.__setattr__(b, "block_hash", b.compute_hash())
        return b


def block_scores(loss_matrix: LossMatrix, aggregator: str) -> np.ndarray:
    """Per-worker scores in the matrix's worker order (accuracy variant flips the sign)."""
    sign = -1.0 if aggregator == "softmax_accuracy" else 1.0
    canon = loss_matrix.canonical()
    scores = agg.softmax_scores(sign * agg.mean_loss(canon))
    order = np.argsort(loss_matrix.worker_ids, kind="stable")
    aligned = np.empty_like(scores)
    aligned[order] = scores
    return aligned


def recompute_global(worker_weights: Dict[int, np.ndarray], loss_matrix: LossMatrix,
                     aggregator: str, krum_f: int, sample_sizes: Dict[int, int]) -> np.ndarray:
    ids = list(loss_matrix.worker_ids)
    weights = [worker_weights[i] for i in ids]
    sizes = [sample_sizes.get(i, 0) for i in ids] if aggregator == "vanilla" else None
    out, _, _ = agg.aggregate(aggregator, weights, loss_matrix, sizes, krum_f)
    return out


def build_block(round: int, prev_hash: bytes, roles: RoleAssignment,
                worker_weights: Dict[int, np.ndarray], loss_matrix: LossMatrix,
                aggregator: str = "softmax", krum_f: int = 0,
                sample_sizes: Optional[Dict[int, int]] = None,
                swaps: Sequence[Tuple[int, int]] = ()) -> Block:
    """Score, aggregate and seal one round. Raises :class:`ProtocolFault` on shape mismatches."""
    if aggregator not in agg.AGGREGATORS:
        raise ProtocolFault(STRUCTURE, f"unknown aggregator {aggregator!r}")
    if len(prev_hash) != HASH_LEN:
        raise ProtocolFault(STRUCTURE, "prev_hash must be 32 bytes")
    L = loss_matrix.canonical()
    if L.worker_ids != roles.workers or L.validator_ids != roles.validators:
        raise ProtocolFault(STRUCTURE, "loss matrix ids do not match the round's roles")
    if set(worker_weights) != set(roles.workers):
        raise ProtocolFault(STRUCTURE, "worker weights do not match the round's workers")
    weights = {int(k): np.asarray(v, dtype=np.float64).copy() for k, v in worker_weights.items()}
    sizes = {int(k): int(v) for k, v in (sample_sizes or {}).items()}
    if aggregator == "vanilla" and set(sizes) != set(roles.workers):
        raise ProtocolFault(STRUCTURE, "vanilla aggregation needs every worker's sample size")
    try:
        scores = block_scores(L, aggregator)
        global_weight = recompute_global(weights, L, aggregator, krum_f, sizes)
    except ConfigurationError as exc:
        raise ProtocolFault(STRUCTURE, str(exc)) from exc
    block = Block(
        round=round,
        prev_hash=bytes(prev_hash),
        role_seed=role_seed(prev_hash, round),
        roles=roles,
        worker_weights=weights,
        loss_matrix=L,
        scores=scores,
        global_weight=global_weight,
        aggregator=aggregator,
        krum_f=int(krum_f),
        sample_sizes=sizes,
        swaps=tuple((int(a), int(b)) for a, b in swaps),
    )
    object.__setattr__(block, "block_hash", block.compute_hash())
    return block


def _bits_equal(a, b) -> bool:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def validate_block(block: Block, prev_hash: bytes) -> ValidationResult:
    """Linkage, hash integrity, then bit-exact recomputation of scores and global weight."""
    r = block.round
    if block.prev_hash != prev_hash:
        return _fault(LINKAGE, "prev_hash does not match the predecessor", r)
    if block.compute_hash() != block.block_hash:
        return _fault(HASH, "block_hash does not match block contents", r)
    if block.role_seed != role_seed(block.prev_hash, r) or block.roles.round != r:
        return _fault(STRUCTURE, "role seed or role round inconsistent with block round", r)
    L = block.loss_matrix
    if L.worker_ids != block.roles.workers or L.validator_ids != block.roles.validators:
        return _fault(STRUCTURE, "loss matrix ids do not match roles", r)
    if set(block.worker_weights) != set(block.roles.workers):
        return _fault(STRUCTURE, "worker weights do not match roles", r)
    if block.aggregator not in agg.AGGREGATORS:
        return _fault(STRUCTURE, f"unknown aggregator {block.aggregator!r}", r)
    try:
        scores = block_scores(L, block.aggregator)
        global_weight = recompute_global(
            block.worker_weights, L, block.aggregator, block.krum_f, block.sample_sizes
        )
    except ConfigurationError as exc:
        return _fault(STRUCTURE, str(exc), r)
    if not _bits_equal(scores, block.scores):
        return _fault(SCORES, "scores differ from softmax of mean validator losses", r)
    if not _bits_equal(global_weight, block.global_weight):
        return _fault(AGGREGATION, "global weight differs from the recomputed aggregate", r)
    return OK


class Chain:
    """Append-only sequence of blocks anchored at a genesis record. Single writer."""

    def __init__(self, genesis: Genesis, blocks: Optional[List[Block]] = None):
        self.genesis = genesis
        self.genesis_hash = genesis.hash
        self.blocks: List[Block] = list(blocks or [])

    def __len__(self):
        return len(self.blocks)

    @property
    def head_hash(self) -> bytes:
        return self.blocks[-1].block_hash if self.blocks else self.genesis_hash

    @property
    def head_weight(self) -> np.ndarray:
        return self.blocks[-1].global_weight if self.blocks else self.genesis.initial_weight

    @property
    def next_round(self) -> int:
        return len(self.blocks) + 1

    def append(self, block: Block) -> None:
        if block.round != self.next_round:
            raise ProtocolFault(ROUND, f"expected round {self.next_round}, got {block.round}")
        result = validate_block(block, self.head_hash)
        if not result:
            raise ProtocolFault(result.code, result.message)
        self.blocks.append(block)


def validate_chain(chain: Chain) -> ValidationResult:
    """Validate every block in order and re-derive each round's role election."""
    g = chain.genesis
    if g.hash != chain.genesis_hash:
        return _fault(GENESIS, "genesis record does not match genesis hash")
    try:
        ledger = g.ledger
    except ConfigurationError as exc:
        return _fault(GENESIS, str(exc))
    prev = chain.genesis_hash
    for expected_round, block in enumerate(chain.blocks, start=1):
        if block.round != expected_round:
            return _fault(ROUND, f"block at position {expected_round} claims round {block.round}",
                          block.round)
        result = validate_block(block, prev)
        if not result:
            return result
        try:
            elected = elect_roles(ledger, block.round, block.prev_hash, g.K, g.V)
            derived = apply_swaps(elected, block.swaps)
        except ConfigurationError as exc:
            return _fault(ROLES, str(exc), block.round)
        if derived != block.roles:
            return _fault(ROLES, "roles differ from the stake election", block.round)
        prev = block.block_hash
    return OK


def compute_round_rewards(block: Block, worker_pool: float = 0.7,
                          validator_pool: float = 0.2, miner_share: float = 0.1,
                          eps: float = 1e-12) -> Dict[int, float]:
    """Split one block's reward between its participants.

    Workers share ``worker_pool`` in proportion to their scores. Validators
    share ``validator_pool`` in proportion to 1 / (eps + mean absolute gap
    between their row and the column means). The miner takes ``miner_share``.
    """
    L = block.loss_matrix
    rewards: Dict[int, float] = {}
    for wid, s in zip(L.worker_ids, block.scores):
        rewards[wid] = worker_pool * float(s)
    means = agg.mean_loss(L)
    deviation = np.abs(L.entries - means).mean(axis=1)
    inverse = 1.0 / (eps + deviation)
    for vid, share in zip(L.validator_ids, inverse / inverse.sum()):
        rewards[vid] = validator_pool * float(share)
    rewards[block.roles.miner] = miner_share
    return rewards


# ------------------------------------------------------------- persistence

def _b64(b: bytes) -> str:
    return base64.b64encode(b).decode("ascii")


def _unb64(s: str) -> bytes:
    raw = base64.b64decode(s, validate=True)
    if _b64(raw) != s:
        raise ValueError("non-canonical base64")
    return raw


def _reals_b64(a) -> str:
    return _b64(np.asarray(a, dtype=np.float64).astype(">f8").tobytes())


def _reals_from_b64(s: str) -> np.ndarray:
    raw = _unb64(s)
    if len(raw) % 8:
        raise ValueError("real array is not a multiple of 8 bytes")
    return np.frombuffer(raw, dtype=">f8").astype(np.float64)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".weights")


class _Sidecar:
    def __init__(self):
        self.chunks: List[bytes] = []
        self.offset = 0

    def put(self, a) -> List[int]:
        raw = np.asarray(a, dtype=np.float64).astype(">f8").tobytes()
        ref = [self.offset, len(raw) // 8]
        self.chunks.append(raw)
        self.offset += len(raw)
        return ref


def write_chain(chain: Chain, path) -> None:
    """Persist as JSON lines (genesis first, one block per line) plus a raw weight sidecar."""
    side = _Sidecar()
    g = chain.genesis
    lines = [
        _dump({
            "type": "genesis",
            "hash": chain.genesis_hash.hex(),
            "shape_tag": g.shape_tag,
            "initial_weight": side.put(g.initial_weight),
            "stake_ids": sorted(g.stakes),
            "stakes": _reals_b64([g.stakes[i] for i in sorted(g.stakes)]),
            "K": g.K,
            "V": g.V,
        })
    ]
    for b in chain.blocks:
        L = b.loss_matrix
        lines.append(_dump({
            "type": "block",
            "round": b.round,
            "prev_hash": _b64(b.prev_hash),
            "role_seed": _b64(b.role_seed),
            "roles": {"round": b.roles.round, "workers": list(b.roles.workers),
                      "validators": list(b.roles.validators), "miner": b.roles.miner},
            "worker_weights": [[wid, side.put(b.worker_weights[wid])]
                               for wid in sorted(b.worker_weights)],
            "loss_matrix": {"validator_ids": list(L.validator_ids),
                            "worker_ids": list(L.worker_ids),
                            "entries": _reals_b64(L.entries.ravel())},
            "scores": _reals_b64(b.scores),
            "global_weight": side.put(b.global_weight),
            "aggregator": b.aggregator,
            "krum_f": b.krum_f,
            "sample_sizes": [[wid, b.sample_sizes[wid]] for wid in sorted(b.sample_sizes)],
            "swaps": [list(s) for s in b.swaps],
            "block_hash": _b64(b.block_hash),
        }))
    path = Path(path)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    sidecar_path(path).write_bytes(b"".join(side.chunks))


class ChainFormatError(ValueError):
    pass


def _check_ints(obj):
    if isinstance(obj, bool):
        raise ChainFormatError("unexpected boolean")
    if isinstance(obj, int) and obj < 0:
        raise ChainFormatError("negative integer field")
    if isinstance(obj, dict):
        for v in obj.values():
            _check_ints(v)
    elif isinstance(obj, list):
        for v in obj:
            _check_ints(v)


def _expect_keys(obj: dict, keys: set, what: str):
    if set(obj) != keys:
        raise ChainFormatError(f"{what}: unexpected key set {sorted(obj)}")


def read_chain(path) -> Chain:
    """Strict reader: each line must be exactly the canonical JSON of what it parses to."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
        weights_raw = sidecar_path(path).read_bytes()
    except (OSError, UnicodeDecodeError) as exc:
        raise ChainFormatError(str(exc)) from exc
    if not text.endswith("\n"):
        raise ChainFormatError("chain file must end with a newline")
    lines = text[:-1].split("\n")
    cursor = 0

    def take(ref) -> np.ndarray:
        nonlocal cursor
        if not (isinstance(ref, list) and len(ref) == 2 and all(type(v) is int for v in ref)):
            raise ChainFormatError("bad sidecar reference")
        offset, count = ref
        if offset != cursor or count < 0 or offset + 8 * count > len(weights_raw):
            raise ChainFormatError("sidecar reference out of sequence or out of range")
        cursor = offset + 8 * count
        return np.frombuffer(weights_raw[offset:cursor], dtype=">f8").astype(np.float64)

    try:
        parsed = []
        for n, line in enumerate(lines):
            obj = json.loads(line)
            if not isinstance(obj, dict) or _dump(obj) != line:
                raise ChainFormatError(f"line {n + 1} is not in canonical form")
            _check_ints(obj)
            parsed.append(obj)
        if not parsed or parsed[0].get("type") != "genesis":
            raise ChainFormatError("first line must be the genesis record")
        g = parsed[0]
        _expect_keys(g, {"type", "hash", "shape_tag", "initial_weight", "stake_ids",
                         "stakes", "K", "V"}, "genesis")
        stakes = _reals_from_b64(g["stakes"])
        if len(stakes) != len(g["stake_ids"]):
            raise ChainFormatError("stake ids and values differ in length")
        genesis = Genesis(g["shape_tag"], take(g["initial_weight"]),
                          {int(i): float(s) for i, s in zip(g["stake_ids"], stakes)},
                          int(g["K"]), int(g["V"]))
        if bytes.fromhex(g["hash"]).hex() != g["hash"]:
            raise ChainFormatError("non-canonical genesis hash")
        chain = Chain(genesis)
        chain.genesis_hash = bytes.fromhex(g["hash"])
        for obj in parsed[1:]:
            _expect_keys(obj, {"type", "round", "prev_hash", "role_seed", "roles",
                               "worker_weights", "loss_matrix", "scores", "global_weight",
                               "aggregator", "krum_f", "sample_sizes", "swaps",
                               "block_hash"}, "block")
            if obj["type"] != "block":
                raise ChainFormatError("unexpected record type")
            ro = obj["roles"]
            _expect_keys(ro, {"round", "workers", "validators", "miner"}, "roles")
            lm = obj["loss_matrix"]
            _expect_keys(lm, {"validator_ids", "worker_ids", "entries"}, "loss_matrix")
            entries = _reals_from_b64(lm["entries"])
            shape = (len(lm["validator_ids"]), len(lm["worker_ids"]))
            if entries.size != shape[0] * shape[1]:
                raise ChainFormatError("loss matrix size mismatch")
            block = Block(
                round=obj["round"],
                prev_hash=_unb64(obj["prev_hash"]),
                role_seed=_unb64(obj["role_seed"]),
                roles=RoleAssignment(ro["round"], tuple(ro["workers"]),
                                     tuple(ro["validators"]), ro["miner"]),
                worker_weights={int(wid): take(ref) for wid, ref in obj["worker_weights"]},
                loss_matrix=LossMatrix(entries.reshape(shape), tuple(lm["validator_ids"]),
                                       tuple(lm["worker_ids"])),
                scores=_reals_from_b64(obj["scores"]),
                global_weight=take(obj["global_weight"]),
                aggregator=obj["aggregator"],
                krum_f=obj["krum_f"],
                sample_sizes={int(wid): int(n) for wid, n in obj["sample_sizes"]},
                swaps=tuple((int(a), int(b)) for a, b in obj["swaps"]),
                block_hash=_unb64(obj["block_hash"]),
            )
            chain.blocks.append(block)
    except ChainFormatError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ChainFormatError(f"malformed chain record: {exc}") from exc
    if cursor != len(weights_raw):
        raise ChainFormatError("sidecar holds bytes no record refers to")
    return chain


def validate_chain_file(path) -> ValidationResult:
    try:
        chain = read_chain(path)
    except ChainFormatError as exc:
        return _fault(ENCODING, str(exc))
    return validate_chain(chain)
