from collections import Counter

import numpy as np
import pytest

from evoarch.genome import (
    CONV,
    GLOBALPOOL,
    HEAD,
    INPUT,
    SKIP,
    Genome,
    Node,
    canonical_node_sequence,
    conv_node,
    fc_node,
    hamming_distance,
    infer_shapes,
    is_valid,
    maxpool_node,
    new_seed_genome,
    validate,
)
from evoarch.mutation import (
    CHANNEL_MENU,
    FC_UNITS_MENU,
    GROWTH_KINDS,
    MUTATION_KINDS,
    ExhaustedRetries,
    MutationWeights,
    RepairFailure,
    apply_mutation,
    mutate_until_valid,
    repair,
    repair_with_count,
    sample_mutation,
)
from helpers import random_genome


def chain(middle, input_shape=(3, 32, 32), num_classes=10):
    nodes = {0: Node(INPUT)}
    preds = {0: ()}
    for i, nd in enumerate(middle, start=1):
        nodes[i] = nd
        preds[i] = (i - 1,)
    last = len(nodes)
    nodes[last] = Node(HEAD, {"classes": num_classes})
    preds[last] = (last - 1,)
    return Genome(input_shape, num_classes, nodes, preds)


def fig_chain():
    """input -> conv -> conv -> pool -> fc -> head."""
    return chain([conv_node(32), conv_node(32), maxpool_node(), fc_node(100)])


# ---------------------------------------------------------------- sampling

def test_exactly_fifteen_kinds():
    assert len(MUTATION_KINDS) == 15
    assert len(set(MUTATION_KINDS)) == 15
    for prefix in ("add_", "remove_"):
        for op in ("convolution", "pooling", "dropout", "skip", "concatenate", "fully_connected"):
            assert prefix + op in MUTATION_KINDS
    for hp in ("channel_number", "filter_size", "stride"):
        assert "alter_" + hp in MUTATION_KINDS


def test_early_weights_double_growth_kinds():
    w = MutationWeights.early()
    assert len(GROWTH_KINDS) == 6
    for k in MUTATION_KINDS:
        assert w.weights[k] == (2.0 if k in GROWTH_KINDS else 1.0)


def test_late_weights_uniform():
    w = MutationWeights.late()
    assert set(w.weights.values()) == {1.0}


def test_sampling_frequencies_match_weights():
    rng = np.random.default_rng(0)
    early = MutationWeights.early()
    n = 1_000_000
    counts = Counter(sample_mutation(rng, early) for _ in range(n))
    assert abs(counts["add_convolution"] / n - 2 / 21) < 0.005
    assert abs(counts["add_pooling"] / n - 1 / 21) < 0.005
    assert abs(counts["alter_stride"] / n - 2 / 21) < 0.005

    late = MutationWeights.late()
    counts = Counter(sample_mutation(rng, late) for _ in range(n))
    for k in MUTATION_KINDS:
        assert abs(counts[k] / n - 1 / 15) < 0.005


def test_sampling_deterministic():
    w = MutationWeights.early()
    a = [sample_mutation(np.random.default_rng(7), w) for _ in range(50)]
    b = [sample_mutation(np.random.default_rng(7), w) for _ in range(50)]
    assert a == b


def test_empty_weights_rejected():
    with pytest.raises(ValueError):
        sample_mutation(np.random.default_rng(0), MutationWeights({}))


# ----------------------------------------------------------- add operators

def test_add_convolution_on_seed():
    rng = np.random.default_rng(0)
    child = apply_mutation(new_seed_genome("global_pool"), "add_convolution", rng)
    assert canonical_node_sequence(child) == "ICGH"
    conv = next(n for n in child.nodes.values() if n.kind == CONV)
    assert conv.params == {"channels": 32, "filter": 3, "stride": 1, "pad": 1}


def test_add_convolution_on_conv_chain():
    # every legal insertion adds one C; the trace through the conv->pool
    # edge must appear among seeded draws
    seqs = set()
    for seed in range(60):
        child = apply_mutation(fig_chain(), "add_convolution", np.random.default_rng(seed))
        assert child is not None
        validate(child)
        seq = canonical_node_sequence(child)
        assert seq.count("C") == 3 and len(seq) == 7
        seqs.add(seq)
    assert "ICCCPFH" in seqs


def test_add_pooling_follows_a_conv():
    child = apply_mutation(chain([conv_node(32), fc_node(100)]), "add_pooling",
                           np.random.default_rng(0))
    assert canonical_node_sequence(child) == "ICPFH"
    pool = next(n for n in child.nodes.values() if n.kind == "maxpool")
    assert pool.params == {"kernel": 2, "stride": 2}


def test_add_pooling_rejected_without_conv():
    assert apply_mutation(new_seed_genome("global_pool"), "add_pooling",
                          np.random.default_rng(0)) is None


def test_add_fully_connected_units_menu():
    seen = set()
    for seed in range(40):
        child = apply_mutation(new_seed_genome("global_pool"), "add_fully_connected",
                               np.random.default_rng(seed))
        validate(child)
        fc = next(n for n in child.nodes.values() if n.kind == "fc")
        seen.add(fc.params["units"])
    assert seen <= set(FC_UNITS_MENU)
    assert len(seen) > 1


def test_add_dropout_after_fc_only():
    g = new_seed_genome("fully_connected", (1, 28, 28), 10)
    child = apply_mutation(g, "add_dropout", np.random.default_rng(0))
    assert "FD" in canonical_node_sequence(child)
    drop = next(n for n in child.nodes.values() if n.kind == "dropout")
    assert drop.params["ratio"] == 0.5
    assert apply_mutation(new_seed_genome("global_pool"), "add_dropout",
                          np.random.default_rng(0)) is None


def test_add_skip_requires_equal_shapes():
    assert apply_mutation(new_seed_genome("global_pool"), "add_skip",
                          np.random.default_rng(0)) is None
    g = chain([conv_node(32), conv_node(32), Node(GLOBALPOOL)])
    child = apply_mutation(g, "add_skip", np.random.default_rng(0))
    assert child is not None
    validate(child)
    assert canonical_node_sequence(child).count("S") == 1


def test_add_concatenate_allows_channel_mismatch():
    g = chain([conv_node(8), conv_node(16), Node(GLOBALPOOL)])
    child = apply_mutation(g, "add_concatenate", np.random.default_rng(0))
    assert child is not None
    validate(child)
    assert canonical_node_sequence(child).count("K") == 1


# -------------------------------------------------------- remove operators

def test_remove_convolution_on_seed_rejected():
    assert apply_mutation(new_seed_genome("global_pool"), "remove_convolution",
                          np.random.default_rng(0)) is None


def test_remove_convolution_splices():
    g = fig_chain()
    child = apply_mutation(g, "remove_convolution", np.random.default_rng(0))
    validate(child)
    assert canonical_node_sequence(child) == "ICPFH"


def test_add_remove_duality():
    # adding a node then removing a node of that kind restores the
    # canonical sequence (the added node is the only one of its kind)
    cases = [
        (new_seed_genome("fully_connected", (1, 28, 28), 10), "add_dropout", "remove_dropout"),
        (chain([conv_node(32), fc_node(100)]), "add_pooling", "remove_pooling"),
        (new_seed_genome("global_pool"), "add_convolution", "remove_convolution"),
    ]
    for g, add_kind, remove_kind in cases:
        before = canonical_node_sequence(g)
        grown = apply_mutation(g, add_kind, np.random.default_rng(1))
        shrunk = apply_mutation(grown, remove_kind, np.random.default_rng(2))
        assert canonical_node_sequence(shrunk) == before


def test_remove_skip_restores_original_wiring():
    g = chain([conv_node(32), conv_node(32), Node(GLOBALPOOL)])
    before = canonical_node_sequence(g)
    grown = apply_mutation(g, "add_skip", np.random.default_rng(3))
    shrunk = apply_mutation(grown, "remove_skip", np.random.default_rng(4))
    validate(shrunk)
    assert canonical_node_sequence(shrunk) == before


# --------------------------------------------------------- alter operators

def test_alter_channel_number_redraws_from_menu():
    g = chain([conv_node(32), Node(GLOBALPOOL)])
    for seed in range(20):
        child = apply_mutation(g, "alter_channel_number", np.random.default_rng(seed))
        conv = next(n for n in child.nodes.values() if n.kind == CONV)
        assert conv.params["channels"] in CHANNEL_MENU
        assert conv.params["channels"] != 32


def test_alter_filter_size_recomputes_pad():
    g = chain([conv_node(32, 3, 1, 1), Node(GLOBALPOOL)])
    for seed in range(20):
        child = apply_mutation(g, "alter_filter_size", np.random.default_rng(seed))
        conv = next(n for n in child.nodes.values() if n.kind == CONV)
        f = conv.params["filter"]
        assert f in (1, 5)
        assert conv.params["pad"] == f // 2
        validate(child)


def test_alter_stride_flips_value():
    g = chain([conv_node(32, 3, 1, 1), Node(GLOBALPOOL)])
    child = apply_mutation(g, "alter_stride", np.random.default_rng(0))
    conv = next(n for n in child.nodes.values() if n.kind == CONV)
    assert conv.params["stride"] == 2
    validate(child)


def test_alter_rejected_without_conv():
    g = new_seed_genome("global_pool")
    for kind in ("alter_channel_number", "alter_filter_size", "alter_stride"):
        assert apply_mutation(g, kind, np.random.default_rng(0)) is None


def test_unknown_kind_raises():
    with pytest.raises(ValueError):
        apply_mutation(new_seed_genome("global_pool"), "transmogrify", np.random.default_rng(0))


# ------------------------------------------------------------------ repair

def join_mismatch(channels_a, channels_b):
    """skip over two stacked convs with differing channel counts."""
    nodes = {
        0: Node(INPUT),
        1: conv_node(channels_a),
        2: conv_node(channels_b),
        3: Node(SKIP),
        4: Node(GLOBALPOOL),
        5: Node(HEAD, {"classes": 10}),
    }
    preds = {0: (), 1: (0,), 2: (1,), 3: (1, 2), 4: (3,), 5: (4,)}
    return Genome((3, 16, 16), 10, nodes, preds)


def test_repair_channel_mismatch_inserts_one_by_one_conv():
    g = join_mismatch(32, 48)
    fixed, fixes = repair_with_count(g)
    validate(fixed)
    assert fixes == 1
    added = [n for i, n in fixed.nodes.items() if i not in g.nodes]
    assert len(added) == 1
    assert added[0].kind == CONV
    assert added[0].params["filter"] == 1
    assert added[0].params["channels"] == 48
    assert infer_shapes(fixed)[3][0] == 48


def test_repair_spatial_mismatch_bumps_pad():
    # branch A: conv+pool -> (8,16,16); branch B: stride-2 conv pad 0 ->
    # (8,15,15); one pad pixel on B makes the skip legal
    nodes = {
        0: Node(INPUT),
        1: conv_node(8, 3, 1, 1),
        2: maxpool_node(2, 2),
        3: conv_node(8, 3, 2, 0),
        4: Node(SKIP),
        5: Node(GLOBALPOOL),
        6: Node(HEAD, {"classes": 10}),
    }
    preds = {0: (), 1: (0,), 2: (1,), 3: (0,), 4: (2, 3), 5: (4,), 6: (5,)}
    g = Genome((3, 32, 32), 10, nodes, preds)
    fixed, fixes = repair_with_count(g)
    validate(fixed)
    assert fixes == 1
    assert len(fixed.nodes) == len(g.nodes)
    assert fixed.nodes[3].params["pad"] == 1
    assert infer_shapes(fixed)[4] == (8, 16, 16)


def test_repair_valid_genome_is_fixed_point():
    g = fig_chain()
    fixed, fixes = repair_with_count(g)
    assert fixes == 0
    assert fixed == g
    assert repair(g) == g


def test_repair_failure_when_unfixable():
    # spatial gap of 16 vs 4 exceeds any pad bump and no channel fix applies
    nodes = {
        0: Node(INPUT),
        1: conv_node(8, 3, 1, 1),
        2: maxpool_node(4, 4),
        3: maxpool_node(4, 4),
        4: Node(SKIP),
        5: Node(GLOBALPOOL),
        6: Node(HEAD, {"classes": 10}),
    }
    preds = {0: (), 1: (0,), 2: (1,), 3: (2,), 4: (1, 3), 5: (4,), 6: (5,)}
    g = Genome((3, 16, 16), 10, nodes, preds)
    with pytest.raises(RepairFailure):
        repair(g)


# ------------------------------------------------------------------ purity

def test_apply_mutation_leaves_input_untouched():
    g = fig_chain()
    text_before = canonical_node_sequence(g)
    nodes_before = dict(g.nodes)
    for kind in MUTATION_KINDS:
        apply_mutation(g, kind, np.random.default_rng(0))
    assert g.nodes == nodes_before
    assert canonical_node_sequence(g) == text_before


def test_apply_mutation_deterministic():
    g = fig_chain()
    for kind in MUTATION_KINDS:
        a = apply_mutation(g, kind, np.random.default_rng(11))
        b = apply_mutation(g, kind, np.random.default_rng(11))
        assert a == b


# ------------------------------------------------------- mutate_until_valid

def test_mutate_until_valid_on_seed():
    rng = np.random.default_rng(0)
    child = mutate_until_valid(new_seed_genome("global_pool"), MutationWeights.early(), rng)
    assert is_valid(child)
    assert len(child.nodes) == 4  # removals always reject on a seed
    assert hamming_distance(child, new_seed_genome("global_pool")) >= 1


def test_mutate_until_valid_exhausts():
    w = MutationWeights({"remove_skip": 1.0})
    with pytest.raises(ExhaustedRetries):
        mutate_until_valid(new_seed_genome("global_pool"), w, np.random.default_rng(0),
                           max_retries=1)


def test_mutate_until_valid_attempt_audit():
    attempts = []
    w = MutationWeights({"remove_skip": 1.0, "add_convolution": 1e-9})
    try:
        mutate_until_valid(new_seed_genome("global_pool"), w, np.random.default_rng(0),
                           max_retries=5, attempts=attempts)
    except ExhaustedRetries:
        pass
    assert 1 <= len(attempts) <= 5
    for rec in attempts:
        assert set(rec) == {"kind", "accepted", "repair_fixes"}


def test_mutate_until_valid_closure():
    rng = np.random.default_rng(12)
    g = new_seed_genome("global_pool", (3, 16, 16), 10)
    for _ in range(300):
        g2 = mutate_until_valid(g, MutationWeights.late(), rng)
        assert is_valid(g2)
        assert g2 != g
        g = g2 if len(g2.nodes) < 40 else new_seed_genome("global_pool", (3, 16, 16), 10)
