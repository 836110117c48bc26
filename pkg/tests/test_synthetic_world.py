import numpy as np
import pytest

from dualdiff import synthetic_world as sw
from dualdiff.errors import ConfigError, VocabError


def test_vocab_basics():
    assert sw.VOCAB.size == 32
    assert sw.WORDS[sw.VOCAB.mask_id] == sw.MASK
    assert len(set(sw.WORDS)) == len(sw.WORDS)


def test_single_object_render_and_caption():
    scene = sw.Scene((sw.SceneObject("square", "red", "top-left"),))
    grid = sw.render(scene)
    # red block occupies the top-left quadrant only
    assert np.all(grid[1:7, 1:7, 0] == 1.0)
    assert np.all(grid[:, 8:, :] == -1.0) and np.all(grid[8:, :, :] == -1.0)
    assert sw.caption_text(scene) == "a red square in the top-left"
    ids = sw.caption_ids(scene)
    assert sw.parse_caption(ids) == scene


def test_render_decode_round_trip_10k():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        scene = sw.random_scene(rng)
        decoded, details = sw.decode_grid(sw.render(scene))
        assert decoded == scene
    # exact render carries full confidence
    scene = sw.random_scene(rng)
    _, details = sw.decode_grid(sw.render(scene))
    for obj in scene.objects:
        d = details[obj.quadrant]
        assert d["color_conf"] == pytest.approx(1.0)
        assert d["shape_conf"] == pytest.approx(1.0)


def test_decode_all_background_is_empty():
    grid = np.full((16, 16, 3), -1.0)
    scene, details = sw.decode_grid(grid)
    assert scene.objects == ()
    assert all(d["occupancy"] == 0.0 for d in details.values())


def test_decode_robust_to_noise():
    rng = np.random.default_rng(1)
    hits = 0
    trials = 1000
    for _ in range(trials):
        scene = sw.random_scene(rng)
        noisy = sw.render(scene) + rng.normal(0.0, 0.1, (16, 16, 3))
        decoded, _ = sw.decode_grid(noisy)
        hits += decoded == scene
    assert hits / trials >= 0.99, hits


def test_grammar_invertibility_on_well_formed_captions():
    rng = np.random.default_rng(2)
    for _ in range(500):
        scene = sw.random_scene(rng)
        text = sw.caption_text(scene)
        assert sw.detokenize(sw.tokenize(text)) == text
        assert sw.parse_caption(sw.caption_ids(scene)) == scene


def test_tokenize_rejects_unknown_words():
    with pytest.raises(VocabError) as ei:
        sw.tokenize("a crimson square in the top-left")
    assert "crimson" in str(ei.value)
    assert "square" in str(ei.value)  # error lists the vocabulary


def test_parse_caption_rejects_malformed():
    assert sw.parse_caption(sw.pad_to_len(sw.tokenize("a red square"))) is None
    assert sw.parse_caption(sw.pad_to_len(sw.tokenize("red square in the top-left"))) is None
    assert sw.parse_caption(sw.pad_to_len([sw.PAD_ID])) is None
    # duplicate quadrant
    bad = "a red square in the top-left and a blue circle in the top-left"
    assert sw.parse_caption(sw.pad_to_len(sw.tokenize(bad))) is None


def test_captions_fit_in_text_len():
    rng = np.random.default_rng(3)
    longest = 0
    for _ in range(2000):
        scene = sw.random_scene(rng)
        n = len(sw.tokenize(sw.caption_text(scene)))
        longest = max(longest, n)
        assert n <= sw.TEXT_LEN
    assert longest == sw.TEXT_LEN  # three-object caption uses the full budget


def test_qa_pairs_cover_attribute_queries():
    scene = sw.Scene(
        (
            sw.SceneObject("square", "red", "top-left"),
            sw.SceneObject("circle", "blue", "bottom-right"),
        )
    )
    pairs = sw.qa_pairs(scene)
    texts = {sw.detokenize(ids[:qlen + 1]) for ids, qlen in pairs}
    assert "color of square ? red" in texts
    assert "color of circle ? blue" in texts
    assert "shape in top-left ? square" in texts
    assert "shape in top-right ? empty" in texts
    assert "how many objects ? two" in texts
    for ids, qlen in pairs:
        seq = sw.qa_sequence(ids, qlen)
        assert seq.frozen[:qlen].all() and not seq.frozen[qlen:].any()


def test_qa_color_asked_only_for_unique_shapes():
    scene = sw.Scene(
        (
            sw.SceneObject("square", "red", "top-left"),
            sw.SceneObject("square", "blue", "top-right"),
        )
    )
    texts = [sw.detokenize(ids) for ids, _ in sw.qa_pairs(scene)]
    assert not any(t.startswith("color of") for t in texts)


def test_scene_invariants_enforced():
    with pytest.raises(ConfigError):
        sw.Scene(
            (
                sw.SceneObject("square", "red", "top-left"),
                sw.SceneObject("circle", "blue", "top-left"),
            )
        )
    with pytest.raises(ConfigError):
        sw.Scene(
            (
                sw.SceneObject("square", "red", "top-right"),
                sw.SceneObject("circle", "blue", "top-left"),
            )
        )


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def test_score_perfect_prediction():
    rng = np.random.default_rng(4)
    scene = sw.random_scene(rng)
    s = sw.score_scene(scene, scene)
    assert s["attribute_acc"] == 1.0 and s["exact_match"] == 1.0
    assert s["color_acc"] == s["shape_acc"] == s["quadrant_acc"] == 1.0


def test_score_single_wrong_color():
    truth = sw.Scene((sw.SceneObject("square", "red", "top-left"),))
    pred = sw.Scene((sw.SceneObject("square", "blue", "top-left"),))
    s = sw.score_scene(pred, truth)
    assert s["attribute_acc"] == pytest.approx(2 / 3)
    assert s["color_acc"] == 0.0 and s["shape_acc"] == 1.0 and s["quadrant_acc"] == 1.0


def test_score_missing_object_costs_full_triple():
    truth = sw.Scene(
        (
            sw.SceneObject("square", "red", "top-left"),
            sw.SceneObject("circle", "blue", "bottom-right"),
        )
    )
    pred = sw.Scene((sw.SceneObject("square", "red", "top-left"),))
    s = sw.score_scene(pred, truth)
    assert s["attribute_acc"] == pytest.approx(3 / 6)
    assert s["count_acc"] == 0.0


def test_score_unparseable_flagged():
    truth = sw.Scene((sw.SceneObject("square", "red", "top-left"),))
    s = sw.score_caption(sw.pad_to_len(sw.tokenize("and and and")), truth)
    assert s["unparseable"] == 1.0 and s["attribute_acc"] == 0.0


def test_random_caption_baseline_near_chance():
    # single-object scenes vs independently drawn single-object captions:
    # per-field accuracy approaches 1/|domain|
    rng = np.random.default_rng(5)

    def one_object_scene():
        return sw.Scene(
            (
                sw.SceneObject(
                    sw.SHAPES[rng.integers(3)],
                    sw.COLORS[rng.integers(6)],
                    sw.QUADRANTS[rng.integers(4)],
                ),
            )
        )

    rows = [sw.score_scene(one_object_scene(), one_object_scene()) for _ in range(10_000)]
    agg = sw.aggregate_scores(rows)
    assert abs(agg["color_acc"] - 1 / 6) < 0.015
    assert abs(agg["shape_acc"] - 1 / 3) < 0.02
    assert abs(agg["quadrant_acc"] - 1 / 4) < 0.02


# ---------------------------------------------------------------------------
# dataset stream and pixmaps
# ---------------------------------------------------------------------------


def test_dataset_determinism_and_round_trip(tmp_path):
    examples = sw.generate_examples(50, seed=7)
    again = sw.generate_examples(50, seed=7)
    for a, b in zip(examples, again):
        assert a.grid.tobytes() == b.grid.tobytes()
        assert np.array_equal(a.caption, b.caption)
        assert len(a.qa) == len(b.qa)

    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    sw.save_dataset(p1, examples, seed=7)
    sw.save_dataset(p2, again, seed=7)
    assert p1.read_bytes() == p2.read_bytes()

    loaded, manifest = sw.load_dataset(p1)
    assert manifest["count"] == 50
    assert len(loaded) == 50
    for a, b in zip(examples, loaded):
        assert a.grid.tobytes() == b.grid.tobytes()
        assert np.array_equal(a.caption, b.caption)
        for (ia, qa), (ib, qb) in zip(a.qa, b.qa):
            assert np.array_equal(ia, ib) and qa == qb


def test_example_scene_property_matches_generation():
    rng = np.random.default_rng(8)
    ex = sw.generate_example(rng)
    decoded, _ = sw.decode_grid(ex.grid)
    assert ex.scene == decoded


def test_ppm_round_trip_preserves_decodability(tmp_path):
    rng = np.random.default_rng(9)
    for _ in range(20):
        scene = sw.random_scene(rng)
        path = tmp_path / "img.ppm"
        sw.save_ppm(path, sw.render(scene))
        back = sw.load_ppm(path)
        decoded, _ = sw.decode_grid(back)
        assert decoded == scene
