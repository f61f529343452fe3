"""Mutation operators over genomes.

Fifteen operators: add/remove for convolution, pooling, dropout, skip,
concatenate and fully connected layers, plus three hyperparameter
alterations on convolutions.  Each operator picks its site uniformly
from the legal candidates via the supplied rng and returns a new genome,
or None when no legal site exists.  Shape inconsistencies introduced by
an edit are repaired (padding bumps and 1x1 channel-matching convs)
before the result is handed back.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from itertools import accumulate

from evoarch.genome import (
    CONCAT,
    CONV,
    DROPOUT,
    FC,
    GLOBALPOOL,
    MAXPOOL,
    SKIP,
    TRUNK_KINDS,
    Node,
    ShapeError,
    conv_node,
    dropout_node,
    fc_node,
    infer_shapes,
    is_valid,
    maxpool_node,
    node_output_shape,
    topological_order,
)

MUTATION_KINDS = (
    "add_convolution",
    "remove_convolution",
    "alter_channel_number",
    "alter_filter_size",
    "alter_stride",
    "add_dropout",
    "remove_dropout",
    "add_pooling",
    "remove_pooling",
    "add_skip",
    "remove_skip",
    "add_concatenate",
    "remove_concatenate",
    "add_fully_connected",
    "remove_fully_connected",
)

# Structure-growing operators favoured while the search is young.
GROWTH_KINDS = frozenset(
    {
        "add_convolution",
        "add_skip",
        "add_concatenate",
        "alter_stride",
        "alter_filter_size",
        "alter_channel_number",
    }
)

CHANNEL_MENU = (8, 16, 32, 48, 64, 96, 128)
FILTER_MENU = (1, 3, 5)
STRIDE_MENU = (1, 2)
FC_UNITS_MENU = (50, 100, 150, 200)

MAX_REPAIR_FIXES = 8
MAX_PAD_BUMP = 2


class RepairFailure(Exception):
    """Shape repair ran out of applicable fixes or its fix budget."""


class ExhaustedRetries(Exception):
    """No accepted mutation within the retry budget."""


@dataclass(frozen=True)
class MutationWeights:
    """Sampling weights per mutation kind plus the stage they encode."""

    weights: dict
    stage: str = "custom"

    @classmethod
    def early(cls):
        return cls({k: 2.0 if k in GROWTH_KINDS else 1.0 for k in MUTATION_KINDS}, "early")

    @classmethod
    def late(cls):
        return cls({k: 1.0 for k in MUTATION_KINDS}, "late")

    def ordered(self):
        kinds = [k for k in MUTATION_KINDS if k in self.weights]
        kinds += [k for k in self.weights if k not in MUTATION_KINDS]
        values = [self.weights[k] for k in kinds]
        if not kinds or any(v <= 0 for v in values):
            raise ValueError("weights must be a non-empty map of positive values")
        return kinds, values


def sample_mutation(rng, weights):
    """Draw one mutation kind with probability proportional to its weight."""
    kinds, values = weights.ordered()
    cum = list(accumulate(values))
    u = rng.random() * cum[-1]
    return kinds[min(bisect_right(cum, u), len(kinds) - 1)]


def _choose(rng, items):
    return items[int(rng.integers(len(items)))]


# ---------------------------------------------------------------------------
# graph edit primitives; each returns fresh node/pred dicts


def _edit_copy(genome):
    return dict(genome.nodes), {i: list(p) for i, p in genome.preds.items()}


def _insert_on_edge(genome, src, dst, slot, node):
    """Place node on the (src, dst) edge; slot indexes dst's pred tuple."""
    nodes, preds = _edit_copy(genome)
    nid = genome.next_id()
    nodes[nid] = node
    preds[nid] = [src]
    preds[dst][slot] = nid
    return genome.replace(nodes, preds)


def _insert_after(genome, target, node):
    """Place node after target; every former consumer of target moves over."""
    nodes, preds = _edit_copy(genome)
    nid = genome.next_id()
    nodes[nid] = node
    for ps in preds.values():
        for j, p in enumerate(ps):
            if p == target:
                ps[j] = nid
    preds[nid] = [target]
    return genome.replace(nodes, preds)


def _insert_join(genome, top, bottom, node):
    """Two-input join over (top, bottom); consumers of bottom move to it."""
    nodes, preds = _edit_copy(genome)
    nid = genome.next_id()
    nodes[nid] = node
    for ps in preds.values():
        for j, p in enumerate(ps):
            if p == bottom:
                ps[j] = nid
    preds[nid] = [top, bottom]
    return genome.replace(nodes, preds)


def _splice_out(genome, target):
    """Remove a single-predecessor node, rewiring consumers to its input."""
    nodes, preds = _edit_copy(genome)
    (parent,) = preds.pop(target)
    del nodes[target]
    for ps in preds.values():
        for j, p in enumerate(ps):
            if p == target:
                ps[j] = parent
    return genome.replace(nodes, preds)


def _remove_join(genome, target, restore_to):
    """Remove a two-input join; its consumers go back to restore_to."""
    nodes, preds = _edit_copy(genome)
    del nodes[target]
    del preds[target]
    for ps in preds.values():
        for j, p in enumerate(ps):
            if p == target:
                ps[j] = restore_to
    return genome.replace(nodes, preds)


def _ensure_flat_head(genome):
    """Insert a global pool before the head if its input went spatial."""
    head = genome.head_id()
    (p,) = genome.preds[head]
    if genome.nodes[p].kind in TRUNK_KINDS:
        return _insert_on_edge(genome, p, head, 0, Node(GLOBALPOOL))
    return genome


def _ancestors(genome):
    anc = {}
    for i in topological_order(genome):
        a = set()
        for p in genome.preds[i]:
            a.add(p)
            a |= anc[p]
        anc[i] = a
    return anc


def _depths(genome):
    """Longest path length from the input to each node."""
    depth = {}
    for i in topological_order(genome):
        ps = genome.preds[i]
        depth[i] = 0 if not ps else 1 + max(depth[p] for p in ps)
    return depth


def _nodes_of_kind(genome, kind):
    return sorted(i for i, n in genome.nodes.items() if n.kind == kind)


def _trunk_edges(genome):
    edges = []
    for dst in sorted(genome.preds):
        for slot, src in enumerate(genome.preds[dst]):
            if genome.nodes[src].kind in TRUNK_KINDS:
                edges.append((src, dst, slot))
    return edges


# ---------------------------------------------------------------------------
# the fifteen operators


def _add_convolution(genome, rng):
    edges = _trunk_edges(genome)
    if not edges:
        return None
    src, dst, slot = _choose(rng, edges)
    return _insert_on_edge(genome, src, dst, slot, conv_node(32, 3, 1, 1))


def _remove_convolution(genome, rng):
    convs = _nodes_of_kind(genome, CONV)
    if not convs:
        return None
    return _ensure_flat_head(_splice_out(genome, _choose(rng, convs)))


def _alter_conv(genome, rng, key, menu):
    convs = _nodes_of_kind(genome, CONV)
    if not convs:
        return None
    target = _choose(rng, convs)
    params = dict(genome.nodes[target].params)
    options = [v for v in menu if v != params[key]]
    if not options:
        return None
    params[key] = _choose(rng, options)
    params["pad"] = params["filter"] // 2
    nodes, preds = _edit_copy(genome)
    nodes[target] = Node(CONV, params)
    return genome.replace(nodes, preds)


def _alter_channel_number(genome, rng):
    return _alter_conv(genome, rng, "channels", CHANNEL_MENU)


def _alter_filter_size(genome, rng):
    return _alter_conv(genome, rng, "filter", FILTER_MENU)


def _alter_stride(genome, rng):
    return _alter_conv(genome, rng, "stride", STRIDE_MENU)


def _add_dropout(genome, rng):
    fcs = _nodes_of_kind(genome, FC)
    if not fcs:
        return None
    return _insert_after(genome, _choose(rng, fcs), dropout_node(0.5))


def _remove_dropout(genome, rng):
    drops = _nodes_of_kind(genome, DROPOUT)
    if not drops:
        return None
    return _ensure_flat_head(_splice_out(genome, _choose(rng, drops)))


def _add_pooling(genome, rng):
    convs = _nodes_of_kind(genome, CONV)
    if not convs:
        return None
    return _insert_after(genome, _choose(rng, convs), maxpool_node(2, 2))


def _remove_pooling(genome, rng):
    pools = _nodes_of_kind(genome, MAXPOOL)
    if not pools:
        return None
    return _ensure_flat_head(_splice_out(genome, _choose(rng, pools)))


def _join_candidates(genome, channels_must_match):
    try:
        shapes = infer_shapes(genome)
    except ShapeError:
        return []
    anc = _ancestors(genome)
    trunk = [i for i in sorted(genome.nodes) if genome.nodes[i].kind in TRUNK_KINDS]
    pairs = []
    for b in trunk:
        sb = shapes[b]
        for a in sorted(anc[b]):
            if genome.nodes[a].kind not in TRUNK_KINDS:
                continue
            sa = shapes[a]
            if sa[1:] != sb[1:]:
                continue
            if channels_must_match and sa[0] != sb[0]:
                continue
            pairs.append((a, b))
    return pairs


def _add_skip(genome, rng):
    pairs = _join_candidates(genome, channels_must_match=True)
    if not pairs:
        return None
    top, bottom = _choose(rng, pairs)
    return _insert_join(genome, top, bottom, Node(SKIP))


def _add_concatenate(genome, rng):
    pairs = _join_candidates(genome, channels_must_match=False)
    if not pairs:
        return None
    top, bottom = _choose(rng, pairs)
    return _insert_join(genome, top, bottom, Node(CONCAT))


def _deeper_pred(genome, target):
    """The join input whose wiring the join had taken over: the one the
    other input is an ancestor of, falling back to the deeper node."""
    q1, q2 = genome.preds[target]
    if q1 == q2:
        return q1
    anc = _ancestors(genome)
    if q1 in anc[q2]:
        return q2
    if q2 in anc[q1]:
        return q1
    depth = _depths(genome)
    if depth[q1] != depth[q2]:
        return q1 if depth[q1] > depth[q2] else q2
    return max(q1, q2)


def _remove_join_kind(genome, rng, kind):
    joins = _nodes_of_kind(genome, kind)
    if not joins:
        return None
    target = _choose(rng, joins)
    restore = _deeper_pred(genome, target)
    return _ensure_flat_head(_remove_join(genome, target, restore))


def _remove_skip(genome, rng):
    return _remove_join_kind(genome, rng, SKIP)


def _remove_concatenate(genome, rng):
    return _remove_join_kind(genome, rng, CONCAT)


def _add_fully_connected(genome, rng):
    head = genome.head_id()
    sites = [("pre_head", head)] + [("after", f) for f in _nodes_of_kind(genome, FC)]
    where, target = _choose(rng, sites)
    units = _choose(rng, FC_UNITS_MENU)
    if where == "pre_head":
        return _insert_on_edge(genome, genome.preds[head][0], head, 0, fc_node(units))
    return _insert_after(genome, target, fc_node(units))


def _remove_fully_connected(genome, rng):
    fcs = _nodes_of_kind(genome, FC)
    if not fcs:
        return None
    return _ensure_flat_head(_splice_out(genome, _choose(rng, fcs)))


_OPERATORS = {
    "add_convolution": _add_convolution,
    "remove_convolution": _remove_convolution,
    "alter_channel_number": _alter_channel_number,
    "alter_filter_size": _alter_filter_size,
    "alter_stride": _alter_stride,
    "add_dropout": _add_dropout,
    "remove_dropout": _remove_dropout,
    "add_pooling": _add_pooling,
    "remove_pooling": _remove_pooling,
    "add_skip": _add_skip,
    "remove_skip": _remove_skip,
    "add_concatenate": _add_concatenate,
    "remove_concatenate": _remove_concatenate,
    "add_fully_connected": _add_fully_connected,
    "remove_fully_connected": _remove_fully_connected,
}


# ---------------------------------------------------------------------------
# shape repair


def _shapes_before_failure(genome):
    """Per-node shapes computed until the first ShapeError, plus that error."""
    shapes = {}
    err = None
    for i in topological_order(genome):
        try:
            shapes[i] = node_output_shape(genome, i, shapes)
        except ShapeError as e:
            err = e
            break
    return shapes, err


def _bump_pad(genome, conv_id, bumps):
    if bumps.get(conv_id, 0) >= MAX_PAD_BUMP:
        return None
    params = dict(genome.nodes[conv_id].params)
    params["pad"] += 1
    bumps[conv_id] = bumps.get(conv_id, 0) + 1
    nodes, preds = _edit_copy(genome)
    nodes[conv_id] = Node(CONV, params)
    return genome.replace(nodes, preds)


def repair(genome):
    """Make shapes consistent with local fixes, or raise RepairFailure.

    Fix order per fault: bump padding on the conv feeding the fault (up to
    two pixels per conv) to equalize spatial dims or revive a degenerate
    output, then insert a 1x1 conv on the smaller-channel branch of a skip.
    At most eight fixes per call.
    """
    fixed, _ = repair_with_count(genome)
    return fixed


def repair_with_count(genome):
    bumps = {}
    fixes = 0
    current = genome
    while True:
        shapes, err = _shapes_before_failure(current)
        if err is None:
            return current, fixes
        if fixes >= MAX_REPAIR_FIXES:
            raise RepairFailure(f"fix budget exhausted: {err}")
        nxt = _apply_fix(current, shapes, err, bumps)
        if nxt is None:
            raise RepairFailure(f"no applicable fix: {err}")
        current = nxt
        fixes += 1


def _apply_fix(genome, shapes, err, bumps):
    i = err.node_id
    node = genome.nodes[i]
    msg = str(err)
    if "not positive" in msg:
        if node.kind == CONV:
            return _bump_pad(genome, i, bumps)
        producer = genome.preds[i][0]
        if genome.nodes[producer].kind == CONV:
            return _bump_pad(genome, producer, bumps)
        return None
    if "spatial mismatch" in msg:
        q1, q2 = genome.preds[i]
        s1, s2 = shapes[q1], shapes[q2]
        small = q1 if (s1[1] + s1[2], q1) < (s2[1] + s2[2], q2) else q2
        if genome.nodes[small].kind == CONV:
            return _bump_pad(genome, small, bumps)
        return None
    if "channel mismatch" in msg:
        q1, q2 = genome.preds[i]
        s1, s2 = shapes[q1], shapes[q2]
        small, need = (q1, s2[0]) if s1[0] < s2[0] else (q2, s1[0])
        slot = list(genome.preds[i]).index(small)
        return _insert_on_edge(genome, small, i, slot, conv_node(need, 1, 1, 0))
    return None


# ---------------------------------------------------------------------------
# public entry points


def apply_mutation(genome, kind, rng):
    """One local rewrite of the given kind, shape-repaired.

    Returns None (rejected) when the operator has no legal site or the
    repair fails.  The input genome is never modified.
    """
    if kind not in _OPERATORS:
        raise ValueError(f"unknown mutation kind {kind!r}")
    child, _ = _apply_with_fixes(genome, kind, rng)
    return child


def _apply_with_fixes(genome, kind, rng):
    edited = _OPERATORS[kind](genome, rng)
    if edited is None:
        return None, 0
    try:
        return repair_with_count(edited)
    except RepairFailure:
        return None, 0


def mutate_until_valid(genome, weights, rng, max_retries=25, attempts=None):
    """Sample kinds until one produces a valid, changed genome.

    Appends one record per attempt to `attempts` when given.  Raises
    ExhaustedRetries after max_retries rejections.
    """
    for _ in range(max_retries):
        kind = sample_mutation(rng, weights)
        child, fixes = _apply_with_fixes(genome, kind, rng)
        accepted = child is not None and child != genome and is_valid(child)
        if attempts is not None:
            attempts.append({"kind": kind, "accepted": bool(accepted), "repair_fixes": fixes})
        if accepted:
            return child
    raise ExhaustedRetries(f"no valid mutation within {max_retries} attempts")
