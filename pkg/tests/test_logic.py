"""Tests for the rule DSL, fuzzy semantics, grounding and weight learning."""

import itertools
import json
import math

import numpy as np
import pytest

from leakscan.errors import ConfigError, DataError
from leakscan.logic import (
    Atom,
    MAX_BODY_ATOMS,
    RuleAST,
    RuleParams,
    RuleTrainConfig,
    atom_probability,
    evaluate_rule,
    evaluate_rules,
    evaluate_ruleset,
    fuzzy_and,
    fuzzy_not,
    fuzzy_or,
    ground_rule,
    init_rule_params,
    load_rule_params,
    parse_rules,
    print_rules,
    ruleset_loss_and_grad,
    save_rule_params,
    train_rule_params,
)
from leakscan.scene import BBox, ClassLabel, DetectedObject, PolygonMask, Scene
from leakscan.scenegen import GenConfig, gen_scenes, label_relation_oracle
from leakscan.relnet import RelationLabel

RULES_TEXT = """
# leak resting on the ground band
OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B).
OilArea(A) <- SuspectedArea(A) & OilStorageDevice(B) & Around(A,B).
OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B) & OilStorageDevice(C) & Around(A,C).
"""


def box_object(oid, label, x1, y1, x2, y2, confidence=1.0):
    return DetectedObject(
        id=oid,
        label=label,
        confidence=confidence,
        bbox=BBox(x1, y1, x2, y2),
        polygon=PolygonMask(((x1, y1), (x2, y1), (x2, y2), (x1, y2))),
    )


def make_scene(objects, leak=None):
    return Scene(image_width=100, image_height=100, objects=tuple(objects), leak_label=leak)


def hash_probs(subject, reference):
    """Deterministic pseudo-random relation probabilities per ordered pair."""
    rng = np.random.default_rng((subject.id, reference.id, 99))
    p = rng.random(3) + 0.05
    return p / p.sum()


def hash_factory(scene):
    return hash_probs


def oracle_factory(scene):
    """Near-crisp relation probabilities straight from the geometric oracle."""
    w, h = scene.image_width, scene.image_height
    table = {
        RelationLabel.ABOVE: np.array([0.9, 0.05, 0.05]),
        RelationLabel.NEARBY: np.array([0.05, 0.9, 0.05]),
        RelationLabel.OTHER: np.array([0.05, 0.05, 0.9]),
    }

    def probs(subject, reference):
        return table[label_relation_oracle(subject, reference, w, h)]

    return probs


# ---------------------------------------------------------------------------
# Fuzzy connectives
# ---------------------------------------------------------------------------

def test_fuzzy_not_involution_sampled():
    rng = np.random.default_rng(0)
    for x in rng.random(1000):
        assert fuzzy_not(fuzzy_not(x)) == x
    assert fuzzy_not(0.0) == 1.0 and fuzzy_not(1.0) == 0.0
    assert fuzzy_not(1.7) == 0.0  # inputs clamp to the unit interval
    assert fuzzy_not(-0.3) == 1.0


def test_fuzzy_or_algebra_sampled():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a, b, c = rng.random(3)
        assert fuzzy_or([a, b]) == fuzzy_or([b, a])
        assert fuzzy_or([fuzzy_or([a, b]), c]) == fuzzy_or([a, fuzzy_or([b, c])])
        assert fuzzy_or([a, a]) == a
        assert 0.0 <= fuzzy_or([a, b, c]) <= 1.0
    assert fuzzy_or([1.4, 0.2]) == 1.0
    with pytest.raises(DataError, match="at least one"):
        fuzzy_or([])


def test_fuzzy_and_monotone_sampled():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        params = RuleParams(
            weights=tuple(rng.uniform(0.0, 1.5, n)), bias=float(rng.uniform(-0.5, 0.5))
        )
        xs = rng.random(n)
        i = int(rng.integers(0, n))
        ys = xs.copy()
        ys[i] = min(1.0, xs[i] + rng.uniform(0.0, 0.5))
        assert fuzzy_and(ys, params) >= fuzzy_and(xs, params)
        assert 0.0 <= fuzzy_and(xs, params) <= 1.0


def test_fuzzy_and_hand_values():
    p = RuleParams(weights=(0.39, 0.323, 0.247), bias=0.04)
    assert fuzzy_and([1.0, 1.0, 1.0], p) == pytest.approx(1.0, abs=1e-12)
    assert fuzzy_and([0.0, 0.0, 0.0], p) == pytest.approx(0.04, abs=1e-15)
    assert fuzzy_and([5.0, 5.0, 5.0], p) == pytest.approx(1.0)  # clamped inputs
    with pytest.raises(DataError, match="arity mismatch"):
        fuzzy_and([0.5, 0.5], p)


def test_rule_params_validation_and_vector():
    with pytest.raises(DataError, match="at least one weight"):
        RuleParams(weights=(), bias=0.1)
    with pytest.raises(DataError, match="finite"):
        RuleParams(weights=(0.5, math.nan), bias=0.0)
    p = RuleParams(weights=(0.25, 0.5), bias=-0.125)
    assert RuleParams.from_vector(p.vector()) == p


# ---------------------------------------------------------------------------
# DSL parsing and printing
# ---------------------------------------------------------------------------

def test_parse_basic_rule():
    rules = parse_rules(RULES_TEXT)
    assert len(rules) == 3
    ast, params = rules[0]
    assert params is None
    assert ast.head == Atom("OilArea", ("A",))
    assert ast.body == (
        Atom("SuspectedArea", ("A",)),
        Atom("Ground", ("B",)),
        Atom("On", ("A", "B")),
    )
    assert ast.variables() == ("A", "B")
    assert rules[2][0].variables() == ("A", "B", "C")


def test_parse_inline_weights_and_negation():
    text = "Dry(A) <- !On(A,B) & Ground(B) : [0.7, -0.2, 0.1].\n"
    (ast, params), = parse_rules(text)
    assert ast.body[0] == Atom("On", ("A", "B"), negated=True)
    assert params == RuleParams(weights=(0.7, -0.2), bias=0.1)
    assert str(ast) == "Dry(A) <- !On(A,B) & Ground(B)"


def test_print_rules_round_trip():
    rules = parse_rules(RULES_TEXT)
    assert parse_rules(print_rules(rules)) == rules
    with_params = [
        (rules[0][0], RuleParams(weights=(0.645, 0.181, 0.162), bias=0.012)),
        (rules[1][0], RuleParams(weights=(0.39, -0.323, 0.247), bias=0.04)),
    ]
    assert parse_rules(print_rules(with_params)) == with_params


@pytest.mark.parametrize(
    "text, message",
    [
        (
            "OilArea(A) <- Wetness(A).",
            r"line 1, column 15: unknown predicate 'Wetness' \(known: Around, "
            r"Ground, OilStorageDevice, On, SuspectedArea\)",
        ),
        (
            "# comment\nOilArea(A) <- On(A).",
            r"line 2, column 15: predicate On takes 2 argument\(s\), got 1",
        ),
        ("!OilArea(A) <- Ground(A).", r"line 1, column 1: rule head cannot be negated"),
        (
            "OilArea(a) <- Ground(a).",
            r"line 1, column 9: variable must be an uppercase identifier, got 'a'",
        ),
        ("OilArea(A) <- Ground(B).", r"head variable A does not appear in the body"),
        (
            "OilArea(A) <- Ground(A) : [0.5, 0.5, 0.1].",
            r"weight vector has 3 entries, rule needs 2",
        ),
        ("OilArea(A) <- Ground(A)", r"expected '.', got 'end of input'"),
        ("OilArea(A) <- Ground(A) @ .", r"line 1, column 25: unexpected character '@'"),
        ("OilArea(A) <- Ground(A) : [0.5].", r"at least one weight and a bias"),
    ],
)
def test_parse_errors_report_position(text, message):
    with pytest.raises(DataError, match=message):
        parse_rules(text)


def test_rule_ast_validation():
    with pytest.raises(DataError, match="positive unary"):
        RuleAST(Atom("OilArea", ("A", "B")), (Atom("Ground", ("A",)),))
    with pytest.raises(DataError, match=f"1..{MAX_BODY_ATOMS}"):
        RuleAST(Atom("OilArea", ("A",)), ())
    with pytest.raises(DataError, match=f"1..{MAX_BODY_ATOMS}"):
        RuleAST(
            Atom("OilArea", ("A",)),
            tuple(Atom("Ground", ("A",)) for _ in range(MAX_BODY_ATOMS + 1)),
        )


# ---------------------------------------------------------------------------
# Atom probabilities and grounding
# ---------------------------------------------------------------------------

def test_atom_probability_cases():
    blob = box_object(1, ClassLabel.SUSPECTED_AREA, 10, 10, 20, 20, confidence=0.8)
    ground = box_object(2, ClassLabel.GROUND, 0, 80, 100, 100, confidence=0.9)
    scene = make_scene([blob, ground])
    ctx = {"A": 1, "B": 2}
    probs = lambda s, r: np.array([0.7, 0.2, 0.1])
    assert atom_probability(Atom("SuspectedArea", ("A",)), ctx, scene, probs) == 0.8
    assert atom_probability(Atom("SuspectedArea", ("B",)), ctx, scene, probs) == 0.0
    assert atom_probability(Atom("Ground", ("B",), negated=True), ctx, scene, probs) == (
        pytest.approx(0.1)
    )
    assert atom_probability(Atom("On", ("A", "B")), ctx, scene, probs) == 0.7
    assert atom_probability(Atom("Around", ("A", "B")), ctx, scene, probs) == 0.2
    assert atom_probability(Atom("On", ("A", "B"), negated=True), ctx, scene, probs) == (
        pytest.approx(0.3)
    )
    with pytest.raises(DataError, match="unbound variable C"):
        atom_probability(Atom("On", ("A", "C")), ctx, scene, probs)


def test_ground_rule_pools_and_shape():
    objs = [
        box_object(1, ClassLabel.SUSPECTED_AREA, 10, 10, 20, 20),
        box_object(2, ClassLabel.SUSPECTED_AREA, 30, 10, 40, 20),
        box_object(3, ClassLabel.GROUND, 0, 80, 100, 100),
        box_object(4, ClassLabel.OIL_STORAGE_DEVICE, 70, 50, 90, 80),
    ]
    scene = make_scene(objs)
    (ast, _), = parse_rules("OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B).")
    x, bindings = ground_rule(ast, scene, hash_probs)
    assert x.shape == (2, 3)  # two blob choices for A, one ground for B
    assert [b["A"] for b in bindings] == [1, 2]
    assert all(b["B"] == 3 for b in bindings)
    # Negated unary atoms do not restrict the pool.
    (ast2, _), = parse_rules("OilArea(A) <- !Ground(A) & On(A,B).")
    x2, bindings2 = ground_rule(ast2, scene, hash_probs)
    assert x2.shape == (16, 2)


def test_evaluate_rule_absent_class_scores_zero():
    scene = make_scene([box_object(1, ClassLabel.GROUND, 0, 80, 100, 100)])
    (ast, _), = parse_rules("OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B).")
    params = RuleParams(weights=(0.645, 0.181, 0.162), bias=0.012)
    assert evaluate_rule(ast, params, scene, hash_probs) == (0.0, None)
    empty = make_scene([])
    assert evaluate_rule(ast, params, empty, hash_probs) == (0.0, None)


# Independent class map for the brute-force oracle below.
_CLASS_OF = {
    "SuspectedArea": ClassLabel.SUSPECTED_AREA,
    "Ground": ClassLabel.GROUND,
    "OilStorageDevice": ClassLabel.OIL_STORAGE_DEVICE,
}


def _slow_atom(atom, lookup, pair_probs):
    if atom.predicate in _CLASS_OF:
        obj = lookup[atom.args[0]]
        p = obj.confidence if obj.label is _CLASS_OF[atom.predicate] else 0.0
    else:
        idx = 0 if atom.predicate == "On" else 1
        p = float(pair_probs(lookup[atom.args[0]], lookup[atom.args[1]])[idx])
        p = min(max(p, 0.0), 1.0)
    return 1.0 - p if atom.negated else p


def _slow_best_score(rule, params, scene, pair_probs):
    """Exhaustive scoring over every variable assignment, no pool pruning."""
    names = rule.variables()
    best = None
    for combo in itertools.product(scene.objects, repeat=len(names)):
        lookup = dict(zip(names, combo))
        if any(
            not a.negated
            and a.predicate in _CLASS_OF
            and lookup[a.args[0]].label is not _CLASS_OF[a.predicate]
            for a in rule.body
        ):
            continue
        z = params.bias
        for w, a in zip(params.weights, rule.body):
            z += w * _slow_atom(a, lookup, pair_probs)
        score = min(max(z, 0.0), 1.0)
        if best is None or score > best:
            best = score
    return 0.0 if best is None else best


def random_scene(rng, max_objects=4):
    labels = [
        ClassLabel.SUSPECTED_AREA,
        ClassLabel.GROUND,
        ClassLabel.OIL_STORAGE_DEVICE,
        ClassLabel.OTHER,
    ]
    objs = []
    for i in range(int(rng.integers(0, max_objects + 1))):
        x1, y1 = rng.uniform(0, 70, 2)
        objs.append(
            box_object(
                i + 1,
                labels[int(rng.integers(0, 4))],
                x1,
                y1,
                x1 + rng.uniform(2, 25),
                y1 + rng.uniform(2, 25),
                confidence=float(rng.uniform(0.5, 1.0)),
            )
        )
    return make_scene(objs)


def test_evaluate_rule_matches_exhaustive_brute_force():
    texts = [
        "OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B).",
        "OilArea(A) <- SuspectedArea(A) & OilStorageDevice(B) & Around(A,B).",
        "OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B) & OilStorageDevice(C) & Around(A,C).",
        "Near(A) <- Around(A,B) & !Ground(A).",
        "Self(A) <- On(A,A).",
        "Dry(A) <- SuspectedArea(A) & !On(A,B) & Ground(B).",
    ]
    rules = [ast for ast, _ in parse_rules("\n".join(texts))]
    rng = np.random.default_rng(10)
    for trial in range(40):
        scene = random_scene(rng)
        for rule in rules:
            n = len(rule.body)
            params = RuleParams(
                weights=tuple(rng.uniform(-0.3, 0.8, n)), bias=float(rng.uniform(-0.2, 0.3))
            )
            got, ctx = evaluate_rule(rule, params, scene, hash_probs)
            want = _slow_best_score(rule, params, scene, hash_probs)
            assert abs(got - want) <= 1e-12
            if ctx is not None:
                # The reported binding really achieves the reported score.
                lookup = {v: scene.object_by_id(i) for v, i in ctx.items()}
                z = params.bias + sum(
                    w * _slow_atom(a, lookup, hash_probs)
                    for w, a in zip(params.weights, rule.body)
                )
                assert abs(min(max(z, 0.0), 1.0) - got) <= 1e-12
            else:
                assert got == 0.0


def test_ruleset_is_max_and_monotone():
    rules = [ast for ast, _ in parse_rules(RULES_TEXT)]
    rng = np.random.default_rng(11)
    params = [
        RuleParams(weights=tuple(rng.uniform(0, 0.5, len(r.body))), bias=0.05)
        for r in rules
    ]
    for _ in range(20):
        scene = random_scene(rng)
        per_rule = evaluate_rules(rules, params, scene, hash_probs)
        total = evaluate_ruleset(rules, params, scene, hash_probs)
        assert total == max(s for s, _ in per_rule)
        # Dropping a rule can only lower (or keep) the score.
        assert total >= evaluate_ruleset(rules[:2], params[:2], scene, hash_probs)
        # Order does not matter.
        assert total == evaluate_ruleset(rules[::-1], params[::-1], scene, hash_probs)
    with pytest.raises(DataError, match="at least one rule"):
        evaluate_ruleset([], [], random_scene(rng), hash_probs)
    with pytest.raises(DataError, match="one RuleParams per rule"):
        evaluate_rules(rules, params[:1], random_scene(rng), hash_probs)


def test_evaluate_rule_params_arity_check():
    (ast, _), = parse_rules("OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B).")
    scene = make_scene(
        [
            box_object(1, ClassLabel.SUSPECTED_AREA, 10, 10, 20, 20),
            box_object(2, ClassLabel.GROUND, 0, 80, 100, 100),
        ]
    )
    with pytest.raises(DataError, match="3 premises"):
        evaluate_rule(ast, RuleParams(weights=(0.5,), bias=0.1), scene, hash_probs)


# ---------------------------------------------------------------------------
# Weight learning
# ---------------------------------------------------------------------------

def test_ruleset_gradients_match_finite_differences():
    rules = [ast for ast, _ in parse_rules(RULES_TEXT)]
    scenes = gen_scenes(GenConfig(seed=30), 12)
    params = init_rule_params(rules, seed=1)
    loss0, grads = ruleset_loss_and_grad(rules, params, scenes, hash_factory)
    assert math.isfinite(loss0)
    h = 1e-6
    worst = 0.0
    for r, p in enumerate(params):
        vec = p.vector()
        for j in range(vec.size):
            shifted = [q for q in params]
            up = vec.copy()
            up[j] += h
            shifted[r] = RuleParams.from_vector(up)
            lp, _ = ruleset_loss_and_grad(rules, shifted, scenes, hash_factory)
            dn = vec.copy()
            dn[j] -= h
            shifted[r] = RuleParams.from_vector(dn)
            lm, _ = ruleset_loss_and_grad(rules, shifted, scenes, hash_factory)
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(grads[r][j]), 1e-8)
            worst = max(worst, abs(fd - grads[r][j]) / denom)
    assert worst < 1e-5


def test_training_converges_on_separable_corpus():
    rules = [ast for ast, _ in parse_rules(RULES_TEXT)]
    scenes = gen_scenes(GenConfig(seed=40), 60)
    labels = [s.leak_label for s in scenes]
    assert True in labels and False in labels  # corpus covers both outcomes
    cfg = RuleTrainConfig(lr=0.1, steps=400, seed=0)
    trained, history = train_rule_params(rules, scenes, oracle_factory, cfg)
    assert len(history) == 400
    assert history[-1].loss < 0.1
    assert history[-1].loss < history[0].loss
    assert history[-1].train_acc >= 0.95
    assert len(trained) == 3


def test_training_zero_lr_returns_init():
    rules = [ast for ast, _ in parse_rules(RULES_TEXT)]
    scenes = gen_scenes(GenConfig(seed=41), 20)
    init = init_rule_params(rules, seed=5)
    cfg = RuleTrainConfig(lr=0.0, steps=10, seed=0)
    trained, history = train_rule_params(rules, scenes, oracle_factory, cfg, init=init)
    assert trained == init
    assert len({h.loss for h in history}) == 1  # loss is frozen too


def test_training_is_deterministic():
    rules = [ast for ast, _ in parse_rules(RULES_TEXT)]
    scenes = gen_scenes(GenConfig(seed=42), 30)
    cfg = RuleTrainConfig(lr=0.1, steps=50, seed=7)
    a_params, a_hist = train_rule_params(rules, scenes, oracle_factory, cfg)
    b_params, b_hist = train_rule_params(rules, scenes, oracle_factory, cfg)
    assert a_params == b_params
    assert a_hist == b_hist


def test_training_input_checks():
    rules = [ast for ast, _ in parse_rules(RULES_TEXT)]
    cfg = RuleTrainConfig(steps=1)
    leaky = gen_scenes(GenConfig(seed=7, tanks=(0, 0), mix=(1.0, 0.0, 0.0)), 6)
    with pytest.raises(DataError, match="both leak and non-leak"):
        train_rule_params(rules, leaky, oracle_factory, cfg)
    unlabeled = [
        Scene(image_width=64, image_height=64, objects=(), leak_label=None)
    ]
    with pytest.raises(DataError, match="no leak label"):
        train_rule_params(rules, unlabeled, oracle_factory, cfg)
    floats = gen_scenes(GenConfig(seed=8, tanks=(0, 0), mix=(0.0, 0.0, 1.0)), 6)
    mixed = leaky + floats  # guaranteed to contain both outcomes
    with pytest.raises(DataError, match="at least one rule"):
        train_rule_params([], mixed, oracle_factory, cfg)
    with pytest.raises(DataError, match="one initial RuleParams"):
        train_rule_params(rules, mixed, oracle_factory, cfg, init=init_rule_params(rules[:1], 0))
    with pytest.raises(ConfigError):
        RuleTrainConfig(lr=-1.0)


# ---------------------------------------------------------------------------
# Parameter files
# ---------------------------------------------------------------------------

def test_rule_params_file_round_trip(tmp_path):
    params = [
        RuleParams(weights=(0.645, 0.181, 0.162), bias=0.012),
        RuleParams(weights=(0.1, -0.25), bias=1.0 / 3.0),
    ]
    path = str(tmp_path / "params.json")
    save_rule_params(params, path)
    assert load_rule_params(path) == params


def test_rule_params_file_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{oops")
    with pytest.raises(DataError, match="corrupt"):
        load_rule_params(str(p))
    p.write_text(json.dumps({"0": {"weights": [0.5], "bias": 0.1}, "2": {}}))
    with pytest.raises(DataError, match="missing index 1"):
        load_rule_params(str(p))
    p.write_text(json.dumps({"0": {"weights": [0.5]}}))
    with pytest.raises(DataError, match="rule 0: bad parameter entry"):
        load_rule_params(str(p))
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(DataError, match="JSON object"):
        load_rule_params(str(p))
