import numpy as np
import pytest

from moile.bench import (
    ACTIONS,
    FEAT,
    INSTRUCTIONS,
    OBJECTS,
    SEP,
    SETUP_NAMES,
    SETUPS,
    FrozenEncoder,
    TaskStream,
    frozen_encode,
    generate_stream,
    make_episode,
    shuffled_control,
    task_order,
    task_table,
    warmup_episodes,
)
from moile.numcore import ContractError

# sequence listings transcribed by hand; HH uses the long setup names
BEHAVIOR = {
    1: "EXAMINE HEAT PICK2&PLACE COOL PICK&PLACE CLEAN MOVABLE",
    2: "PICK2&PLACE CLEAN MOVABLE PICK&PLACE HEAT EXAMINE COOL",
    3: "MOVABLE COOL PICK&PLACE HEAT CLEAN EXAMINE PICK2&PLACE",
}
ENVIRONMENT = {
    1: "BEDROOMS BATHROOMS LIVINGROOMS KITCHENS",
    2: "KITCHENS BEDROOMS LIVINGROOMS BATHROOMS",
    3: "BATHROOMS LIVINGROOMS KITCHENS BEDROOMS",
}
HYBRID = {
    1: ["Low-level Action Behavior", "High-level Instruction Behavior",
        "Low-level Action Environment", "High-level Instruction Environment"],
    2: ["High-level Instruction Behavior", "Low-level Action Behavior",
        "High-level Instruction Environment", "Low-level Action Environment"],
    3: ["Low-level Action Behavior", "Low-level Action Environment",
        "High-level Instruction Behavior", "High-level Instruction Environment"],
}


def expected_order(setup, order):
    if setup in ("HB", "LB"):
        return tuple(BEHAVIOR[order].split())
    if setup in ("HE", "LE"):
        return tuple(ENVIRONMENT[order].split())
    by_name = {v: k for k, v in SETUP_NAMES.items()}
    return tuple(by_name[n] for n in HYBRID[order])


@pytest.mark.parametrize("setup", SETUPS)
@pytest.mark.parametrize("order", [1, 2, 3])
def test_orders_match_listings(setup, order):
    assert task_order(setup, order) == expected_order(setup, order)


def test_bad_order_and_setup():
    with pytest.raises(ContractError):
        task_order("HB", 4)
    with pytest.raises(ContractError):
        task_order("XX", 1)


def test_episode_is_pure():
    a = make_episode("HB", "HEAT", 3, "train", 5)
    b = make_episode("HB", "HEAT", 3, "train", 5)
    assert a.context == b.context and a.target == b.target
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.embedding, b.embedding)
    c = make_episode("HB", "HEAT", 3, "eval", 5)
    assert not np.array_equal(a.features, c.features)


def test_levels_use_distinct_target_vocabularies():
    lo_inst = 2 + len(OBJECTS)
    lo_act = lo_inst + len(INSTRUCTIONS)
    hi = make_episode("HB", "HEAT", 0, "train", 0)
    lo = make_episode("LB", "HEAT", 0, "train", 0)
    assert hi.context[0] == FEAT and hi.context[-1] == SEP
    assert all(lo_inst <= t < lo_act for t in hi.target)
    assert all(lo_act <= t < lo_act + len(ACTIONS) for t in lo.target)


def test_neighbouring_tasks_are_similar_not_identical():
    a = task_table("HB", "HEAT", 0)
    b = task_table("HB", "COOL", 0)
    same = sum(a.key_map[k] == b.key_map.get(k) for k in a.key_map)
    assert 0 < same < len(a.key_map)


def test_stream_shape_and_roundtrip(tmp_path):
    s = generate_stream("HE", 2, seed=1, episodes_per_task=8, eval_per_task=4)
    assert s.names == list(task_order("HE", 2))
    assert all(len(t.train) == 8 and len(t.eval) == 4 for t in s.tasks)
    path = s.write_jsonl(tmp_path / "s.jsonl")
    back = TaskStream.read_jsonl(path)
    assert back.digest() == s.digest()
    assert back.names == s.names
    # regenerating writes the same bytes
    again = generate_stream("HE", 2, seed=1, episodes_per_task=8, eval_per_task=4).write_jsonl(tmp_path / "t.jsonl")
    assert path.read_bytes() == again.read_bytes()


def test_hh_stream_phases():
    s = generate_stream("HH", 1, episodes_per_task=8, eval_per_task=4)
    assert s.names == ["LB", "HB", "LE", "HE"]
    assert {ep.setup for ep in s.tasks[0].train} == {"LB"}


def test_encoder_is_frozen_and_deterministic(rng):
    enc = FrozenEncoder(0)
    feats = rng.standard_normal(16)
    ctx = (FEAT, 2, 3, SEP)
    np.testing.assert_array_equal(enc(feats, ctx), frozen_encode(feats, ctx, seed=0))
    assert enc(feats, ctx).shape == (enc.dim,)


def test_embeddings_separate_setups():
    # distinct setups should be farther apart than episodes within a setup
    s = generate_stream("HH", 1, episodes_per_task=32, eval_per_task=4)
    means = [np.mean([ep.embedding for ep in t.train], axis=0) for t in s.tasks]
    spread = np.mean([np.linalg.norm(ep.embedding - means[0]) for ep in s.tasks[0].train])
    gaps = [np.linalg.norm(means[0] - m) for m in means[1:]]
    assert min(gaps) > 0.5 * spread


def test_shuffled_control_keeps_inputs():
    s = generate_stream("LB", 1, episodes_per_task=16, eval_per_task=8)
    ctl = shuffled_control(s.tasks[0])
    assert [ep.context for ep in ctl.train] == [ep.context for ep in s.tasks[0].train]
    assert sorted(ep.target for ep in ctl.train) == sorted(ep.target for ep in s.tasks[0].train)


def test_warmup_episodes():
    eps = warmup_episodes(0, 8)
    assert len(eps) == 8 and {ep.setup for ep in eps} == {"HB", "HE", "LB", "LE"}
