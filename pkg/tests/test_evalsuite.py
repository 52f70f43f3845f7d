import numpy as np
import pytest

from caplab import datagen as dg
from caplab import evalsuite as E
from caplab import model as M
from caplab import tok
from caplab import train as TR
from caplab.errors import ConfigError, InsufficientShots, ShapeError

V = 18


def gvocab():
    return tok.Vocab(dg.grammar_terminals())


def frozen_setup(objective="cap", seed=0, n=12):
    cfg = M.ModelConfig(vocab=V, objective=objective)
    params = M.init_params(cfg, seed=seed)
    data = dg.gen_dataset(n, seed=seed + 50)
    return cfg, params, data


# -- features -----------------------------------------------------------------


def test_extract_features_shape_determinism_composition():
    cfg, params, data = frozen_setup()
    images = np.stack([ex.image for ex in data])
    feats = E.extract_features(cfg, params, images, mode="gap")
    assert feats.shape == (len(data), cfg.width)
    again = E.extract_features(cfg, params, images, mode="gap")
    assert feats.tobytes() == again.tobytes()
    # gap mode is pool_gap o encode_image
    one = M.pool_gap(M.encode_image(cfg, params, data[0].image))
    np.testing.assert_allclose(feats[0], one.data, atol=1e-6)


def test_extract_features_prelogits_needs_clip():
    cfg, params, data = frozen_setup(objective="clip")
    images = np.stack([ex.image for ex in data])
    feats = E.extract_features(cfg, params, images, mode="prelogits")
    assert feats.shape == (len(data), cfg.width)
    cap_cfg, cap_params, _ = frozen_setup()
    with pytest.raises(ConfigError):
        E.extract_features(cap_cfg, cap_params, images, mode="prelogits")


def test_extract_sequences_shape():
    cfg, params, data = frozen_setup(n=5)
    seqs = E.extract_sequences(cfg, params, np.stack([e.image for e in data]))
    assert seqs.shape == (5, cfg.num_patches, cfg.width)


def test_feature_extraction_never_mutates_params():
    cfg, params, data = frozen_setup()
    before = {k: v.data.copy() for k, v in params.items()}
    E.extract_features(cfg, params, np.stack([e.image for e in data]))
    for name, p in params.items():
        assert p.data.tobytes() == before[name].tobytes()


# -- probes -------------------------------------------------------------------


def test_probe_one_hot_features_reach_perfect_accuracy():
    classes, per = 4, 8
    labels = np.repeat(np.arange(classes), per)
    feats = np.eye(classes, dtype=np.float32)[labels]
    res = E.kshot_probe(feats, labels, k=4, probe_kind="linear", seed=0)
    assert res.accuracy == 1.0
    assert all(v == 1.0 for v in res.per_class.values())
    assert res.kind == "linear" and res.shots == 4


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(0)
    classes, per = 4, 40
    labels = rng.permutation(np.repeat(np.arange(classes), per))
    feats = rng.standard_normal((classes * per, 8)).astype(np.float32)
    res = E.kshot_probe(feats, labels, k=10, probe_kind="linear", seed=1)
    # 3 sigma of binomial around 1/4 on the eval split
    n_eval = classes * (per - 10)
    sigma = np.sqrt(0.25 * 0.75 / n_eval)
    assert abs(res.accuracy - 0.25) < 4 * sigma + 0.02


def test_probe_insufficient_shots():
    labels = np.array([0, 0, 1, 1, 1])
    feats = np.zeros((5, 3), dtype=np.float32)
    with pytest.raises(InsufficientShots):
        E.kshot_probe(feats, labels, k=2, probe_kind="linear", seed=0)


def test_probe_kind_feature_rank_validation():
    feats2d = np.zeros((8, 4), dtype=np.float32)
    feats3d = np.zeros((8, 5, 4), dtype=np.float32)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(ConfigError):
        E.kshot_probe(feats3d, labels, k=2, probe_kind="linear")
    with pytest.raises(ConfigError):
        E.kshot_probe(feats2d, labels, k=2, probe_kind="map")


def test_map_probe_runs_on_sequences():
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(2), 6)
    # class signal in the mean of the sequence
    seqs = rng.standard_normal((12, 4, 8)).astype(np.float32) * 0.1
    seqs[labels == 1] += 1.0
    res = E.kshot_probe(seqs, labels, k=3, probe_kind="map", seed=0)
    assert res.accuracy > 0.6


def test_mlp_probe_runs():
    labels = np.repeat(np.arange(2), 8)
    feats = np.eye(2, dtype=np.float32)[labels]
    res = E.kshot_probe(feats, labels, k=4, probe_kind="mlp", seed=0)
    assert res.accuracy == 1.0


# -- retrieval -----------------------------------------------------------------


def test_retrieval_identical_embeddings():
    emb = np.random.default_rng(1).standard_normal((10, 6)).astype(np.float32)
    i2t, t2i = E.retrieval_eval(emb, emb.copy())
    assert i2t == 1.0 and t2i == 1.0


def test_retrieval_random_near_chance():
    rng = np.random.default_rng(2)
    k = 64
    rates = []
    for _ in range(8):
        img = rng.standard_normal((k, 16)).astype(np.float32)
        txt = rng.standard_normal((k, 16)).astype(np.float32)
        rates.extend(E.retrieval_eval(img, txt))
    assert abs(np.mean(rates) - 1.0 / k) < 3.0 / k


def test_retrieval_matches_bruteforce_oracle():
    rng = np.random.default_rng(3)
    for k in (4, 16, 64):
        img = rng.standard_normal((k, 8)).astype(np.float32)
        txt = rng.standard_normal((k, 8)).astype(np.float32)
        got = E.retrieval_eval(img, txt)
        # O(K^2) float64 re-computation with explicit loops
        def cos(a, b):
            return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        i2t = t2i = 0
        for i in range(k):
            s_i = [cos(img[i].astype(np.float64), txt[j].astype(np.float64))
                   for j in range(k)]
            if all(s_i[i] > s_i[j] for j in range(k) if j != i):
                i2t += 1
            s_t = [cos(img[j].astype(np.float64), txt[i].astype(np.float64))
                   for j in range(k)]
            if all(s_t[i] > s_t[j] for j in range(k) if j != i):
                t2i += 1
        assert got == (i2t / k, t2i / k)


def test_retrieval_ties_fail_and_count_mismatch():
    emb = np.ones((3, 4), dtype=np.float32)
    i2t, t2i = E.retrieval_eval(emb, emb)
    assert i2t == 0.0 and t2i == 0.0
    with pytest.raises(ShapeError):
        E.retrieval_eval(np.ones((3, 4)), np.ones((4, 4)))


# -- perturbation benchmark --------------------------------------------------------


def test_untrained_scorer_near_chance_and_blind_identical():
    cfg, params, _ = frozen_setup()
    vocab = gvocab()
    data = dg.gen_dataset(120, seed=9, objects=(2, 2))
    scorers = {
        "cap-causal": E.make_caption_scorer(cfg, params, vocab),
        "blind": E.make_blind_scorer(cfg, params, vocab),
    }
    rep = E.perturbation_benchmark(scorers, data, kinds=("order-swap",),
                                   seed=0, limit=60)
    assert rep.pairs["order-swap"] >= 50
    assert 0.2 < rep.accuracy["cap-causal"]["order-swap"] < 0.8
    # blind scorer: swap every image for noise, report identical
    rng = np.random.default_rng(5)
    noisy = [dg.Example(image=rng.random(ex.image.shape).astype(np.float32),
                        caption=ex.caption, scene=ex.scene) for ex in data]
    rep2 = E.perturbation_benchmark(
        {"blind": E.make_blind_scorer(cfg, params, vocab)}, noisy,
        kinds=("order-swap",), seed=0, limit=60)
    assert rep.accuracy["blind"] == rep2.accuracy["blind"]


def test_constant_scorer_scores_exactly_zero():
    data = dg.gen_dataset(40, seed=11, objects=(2, 2))

    def constant(image, captions):
        return np.zeros(len(captions))

    rep = E.perturbation_benchmark({"const": constant}, data,
                                   kinds=("order-swap", "relation-swap"),
                                   seed=0)
    assert rep.accuracy["const"]["order-swap"] == 0.0
    assert rep.accuracy["const"]["relation-swap"] == 0.0


def test_perturb_report_csv_schema():
    data = dg.gen_dataset(30, seed=12, objects=(2, 2))

    def constant(image, captions):
        return np.zeros(len(captions))

    rep = E.perturbation_benchmark({"c": constant}, data,
                                   kinds=("order-swap",), seed=0)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "scorer,kind,accuracy,pairs"
    assert lines[1].startswith("c,order-swap,0.000000,")


# -- LiT alignment -----------------------------------------------------------------


def test_lit_align_trains_only_new_components():
    cfg, params, data = frozen_setup(n=32)
    vocab = gvocab()
    before = {k: v.data.copy() for k, v in params.items()}
    aligned = E.lit_align(cfg, params, data, vocab, steps=12, batch=8, seed=0)
    for name, p in params.items():
        assert p.data.tobytes() == before[name].tobytes(), name
    img = E.lit_embed_images(aligned, cfg, params,
                             np.stack([e.image for e in data[:4]]))
    txt = E.lit_embed_texts(aligned, vocab, [e.caption for e in data[:4]])
    assert img.shape == (4, cfg.width) and txt.shape == (4, cfg.width)
    # loss should come down on toy data
    assert np.mean(aligned.losses[-4:]) < np.mean(aligned.losses[:4])


# -- fresh decoder transfer -----------------------------------------------------------


def test_label_text_roundtrip():
    for ex in dg.gen_dataset(32, seed=13):
        text = E.label_to_text(ex.scene)
        assert E.text_to_label(text) == dg.class_label(ex.scene)
    assert E.text_to_label("red circle") is None
    assert E.text_to_label("class: purple blob") is None


def test_fresh_decoder_transfer_frozen_encoder_and_metrics():
    cfg, params, _ = frozen_setup()
    train_set = dg.gen_dataset(48, seed=14, objects=(1, 1))
    eval_set = dg.gen_dataset(16, seed=15, objects=(1, 1))
    task_vocab = E.build_task_vocab(train_set + eval_set)
    dec_cfg = M.ModelConfig(vocab=task_vocab.size, dec_layers=2,
                            max_len=cfg.max_len)
    before = {k: v.data.copy() for k, v in params.items()}
    res = E.fresh_decoder_transfer(cfg, params, dec_cfg, train_set, eval_set,
                                   steps=20, batch=8, seed=0)
    for name, p in params.items():
        assert p.data.tobytes() == before[name].tobytes()
    assert 0.0 <= res.cls_accuracy <= 1.0
    assert np.isfinite(res.caption_ce)
    assert np.mean(res.losses[-4:]) < np.mean(res.losses[:4])


def test_dataset_caption_ce_matches_training_scale():
    cfg, params, data = frozen_setup(n=16)
    ce = E.dataset_caption_ce(cfg, params, gvocab(), data)
    assert 1.0 < ce < 2.0 * np.log(V)
