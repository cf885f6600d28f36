import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import reference as ref
from kgalign.evaluation import (
    DataError,
    SimilarityMatrix,
    fuse,
    mm_similarity,
    rank_actions,
    top_k_accuracy,
    tri_similarity,
)
from kgalign.features import synth_dataset
from kgalign.graph import EntityId
from kgalign.inference import UnknownVideoError, evaluate_checkpoint, infer, score_videos
from kgalign.model import identity_configuration, init_model, parameters
from kgalign.trainer import FeatureSet, TrainConfig, Trainer, save_checkpoint, train

D = 8


def perturbed(seed):
    state, table = init_model(D, 2, seed=seed)
    g = np.random.default_rng(seed + 100)
    for p in parameters(state, table).values():
        p.data += g.normal(scale=0.3, size=p.shape)
    return state, table


# ---------------------------------------------------------------- mm


def test_mm_diagonal_and_orthogonal():
    X = np.random.default_rng(0).normal(size=(4, D))
    S = mm_similarity(X, X)
    np.testing.assert_allclose(np.diag(S.values), 1.0, atol=1e-15)
    assert mm_similarity(np.eye(1, D), np.eye(2, D)[1:]).values[0, 0] == 0.0
    assert S.provenance == "mm"


def test_mm_loop_oracle():
    g = np.random.default_rng(1)
    V, A = g.normal(size=(5, D)), g.normal(size=(3, D))
    assert np.max(np.abs(mm_similarity(V, A).values - ref.mm_similarity(V, A))) < 1e-12


@settings(max_examples=50)
@given(st.integers(0, 9999), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_mm_scale_invariance(seed, a, b):
    g = np.random.default_rng(seed)
    V, A = g.normal(size=(3, D)), g.normal(size=(4, D))
    assert np.max(np.abs(mm_similarity(a * V, b * A).values - mm_similarity(V, A).values)) < 1e-12


def test_mm_zero_row_rejected():
    with pytest.raises(DataError, match="video"):
        mm_similarity(np.zeros((2, D)), np.ones((2, D)))


# ---------------------------------------------------------------- tri


def test_tri_matches_pairwise_oracle():
    state, table = perturbed(2)
    g = np.random.default_rng(2)
    V, A = g.normal(size=(3, D)), g.normal(size=(4, D))
    got = tri_similarity(state, table, V, A).values
    assert np.max(np.abs(got - ref.tri_similarity(state, table, V, A))) < 1e-10


def test_tri_identity_reduces_to_mm():
    state, table = perturbed(3)
    identity_configuration(state, table)
    g = np.random.default_rng(3)
    V, A = g.normal(size=(10, D)), g.normal(size=(10, D))
    diff = tri_similarity(state, table, V, A).values - mm_similarity(V, A).values
    assert np.max(np.abs(diff)) < 1e-12
    same = tri_similarity(state, table, V[:1], V[:1]).values
    assert abs(same[0, 0] - 1.0) < 1e-12


@pytest.mark.parametrize("chunk", [1, 5, 7, 256])
def test_tri_chunking_is_invisible(chunk):
    state, table = perturbed(4)
    g = np.random.default_rng(4)
    V, A = g.normal(size=(6, D)), g.normal(size=(5, D))
    base = tri_similarity(state, table, V, A, chunk=30).values
    assert np.max(np.abs(tri_similarity(state, table, V, A, chunk=chunk).values - base)) < 1e-13


def test_tri_range():
    state, table = perturbed(5)
    g = np.random.default_rng(5)
    S = tri_similarity(state, table, g.normal(size=(4, D)), g.normal(size=(3, D))).values
    assert np.all(np.abs(S) <= 1)


# ---------------------------------------------------------------- fuse


def test_fuse_cases():
    M = np.random.default_rng(6).uniform(-1, 1, size=(3, 4))
    same = fuse(SimilarityMatrix(M, "mm"), SimilarityMatrix(M, "tri"))
    assert np.array_equal(same.values, M) and same.provenance == "fused"
    half = fuse(SimilarityMatrix(np.zeros((3, 4)), "mm"), SimilarityMatrix(M, "tri"))
    assert np.array_equal(half.values, M / 2)


def test_fuse_elementwise_oracle():
    g = np.random.default_rng(7)
    a, b = g.uniform(-1, 1, size=(5, 6)), g.uniform(-1, 1, size=(5, 6))
    got = fuse(SimilarityMatrix(a, "mm"), SimilarityMatrix(b, "tri")).values
    assert np.max(np.abs(got - np.array(ref.fuse(a, b)))) < 1e-12


def test_fuse_rejects_mismatch():
    with pytest.raises(DataError):
        fuse(SimilarityMatrix(np.zeros((2, 3)), "mm"), SimilarityMatrix(np.zeros((3, 2)), "tri"))
    with pytest.raises(DataError):
        fuse(SimilarityMatrix(np.zeros((1, 2)), "mm", ["v"], ["a", "b"]),
             SimilarityMatrix(np.zeros((1, 2)), "tri", ["v"], ["b", "a"]))


@settings(max_examples=100)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1, 1)), arrays(np.float64, (4, 5), elements=st.floats(-1, 1)))
def test_fusion_argmax_agreement(a, b):
    # Rounding is monotone, so an argmax both inputs agree on still attains
    # the fused maximum; a strict gap may round to a tie (e.g. subnormals).
    top_a, top_b = rank_actions(a)[:, 0], rank_actions(b)[:, 0]
    fused = fuse(SimilarityMatrix(a, "mm"), SimilarityMatrix(b, "tri")).values
    for i in np.flatnonzero(top_a == top_b):
        assert fused[i, top_a[i]] == fused[i].max()


def test_fusion_argmax_agreement_example():
    a = np.array([[0.1, 0.7, 0.3], [0.9, 0.2, 0.4]])
    b = np.array([[0.2, 0.5, 0.1], [0.6, 0.1, 0.3]])
    fused = fuse(SimilarityMatrix(a, "mm"), SimilarityMatrix(b, "tri")).values
    assert rank_actions(fused)[:, 0].tolist() == [1, 0]


def test_missing_cells_rejected():
    with pytest.raises(DataError):
        SimilarityMatrix(np.array([[0.1, np.nan]]), "mm")


# ---------------------------------------------------------------- top-k


def test_topk_examples():
    row = np.array([[0.9, 0.1, 0.5]])
    assert top_k_accuracy(row, [0], 1).top1 == 1.0
    r = top_k_accuracy(row, [2], 2)
    assert r.top1 == 0.0 and r.topk[2] == 1.0


def test_ties_go_to_lower_index():
    S = np.array([[0.5, 0.5, 0.1], [0.2, 0.7, 0.7]])
    assert rank_actions(S)[:, 0].tolist() == [0, 1]
    r = top_k_accuracy(S, [1, 2])
    assert r.top1 == 0.0 and r.ties == 2


def sort_oracle(values, labels, k):
    hits = 0
    for row, lab in zip(values, labels):
        ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += lab in ranked[:k]
    return hits / len(values)


def test_topk_matches_sort_oracle():
    g = np.random.default_rng(8)
    S = np.round(g.uniform(-1, 1, size=(100, 12)), 1)  # coarse values force ties
    labels = g.integers(0, 12, size=100).tolist()
    for k in (1, 3, 5, 12):
        r = top_k_accuracy(S, labels, k)
        assert r.topk[k] == sort_oracle(S, labels, k)
    r = top_k_accuracy(S, labels)
    assert r.top1 == sort_oracle(S, labels, 1) and r.top5 == sort_oracle(S, labels, 5)


@settings(max_examples=50)
@given(st.integers(0, 9999))
def test_topk_monotone_in_k(seed):
    g = np.random.default_rng(seed)
    S = g.normal(size=(20, 7))
    labels = g.integers(0, 7, size=20).tolist()
    accs = [top_k_accuracy(S, labels, k).topk[k] for k in range(1, 8)]
    assert accs == sorted(accs) and accs[-1] == 1.0
    r = top_k_accuracy(S, labels)
    assert 0 <= r.top1 <= r.top5 <= 1


def test_labels_by_column_key_and_per_action():
    S = SimilarityMatrix(np.array([[0.9, 0.1], [0.8, 0.3], [0.1, 0.2]]), "mm", ["v1", "v2", "v3"], ["a", "b"])
    r = top_k_accuracy(S, ["a", "b", "b"])
    assert r.top1 == pytest.approx(2 / 3)
    assert r.per_action == {"a": 1.0, "b": 0.5}
    with pytest.raises(DataError):
        top_k_accuracy(S, ["a", "b", "zz"])


# ---------------------------------------------------------------- inference


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ds = synth_dataset(m_actions=4, l_movements=8, n_videos=40, dim=8, noise_sigma=0.3, seed=2)
    feats = FeatureSet(ds.table, ds.frames)
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(epochs=4, warmup_epochs=1, batch_size=8, tau=0.1, base_lr_encoder=1e-3, base_lr_other=1e-2)
    trainer = train(ds.graph, feats, cfg, out)
    return ds, feats, out / "final.ckpt", trainer


def test_infer_full_permutation(trained):
    ds, feats, ckpt, _ = trained
    vid = ds.graph.videos("test")[0].label
    ranked = infer(ckpt, feats, [vid], top_n=4)[vid]
    assert sorted(a for a, _ in ranked) == [f"action_{i:02d}" for i in range(4)]
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_infer_top1_agrees_with_report(trained):
    ds, feats, ckpt, trainer = trained
    result = evaluate_checkpoint(ckpt, ds.graph, feats)
    vids = [v.label for v in ds.graph.videos("test")]
    ranked = infer(ckpt, feats, vids, top_n=1)
    hits = np.mean([ranked[v][0][0] == ds.graph.video_actions[v] for v in vids])
    assert hits == result.report.top1 == trainer.evaluate().top1
    lines = result.tsv().splitlines()
    assert len(lines) == len(vids) + 1 and lines[0].startswith("video\tlabel\tpredicted")


def test_infer_unknown_video(trained):
    _, feats, ckpt, _ = trained
    with pytest.raises(UnknownVideoError):
        infer(ckpt, feats, ["no_such_video"])


def test_infer_identity_model(tmp_path):
    ds = synth_dataset(m_actions=4, l_movements=8, n_videos=16, dim=8, seed=4)
    t = Trainer(ds.graph, FeatureSet(ds.table, ds.frames), TrainConfig(epochs=2, warmup_epochs=1))
    identity_configuration(t.state, t.table)
    target = t.action_ids()[2]
    vid = ds.graph.videos("test")[0]
    vectors = ds.table.vectors.copy()
    vectors[ds.table.index(vid)] = t.text.data[t.text_index[target]]
    save_checkpoint(tmp_path / "id.ckpt", t)
    feats = FeatureSet(type(ds.table)(ds.table.ids, vectors))
    best, score = infer(tmp_path / "id.ckpt", feats, [vid.label], top_n=1)[vid.label][0]
    assert best == target.label and abs(score - 1.0) < 1e-12


def test_mm_only_checkpoint_scores_with_cosine(tmp_path):
    ds = synth_dataset(m_actions=4, l_movements=8, n_videos=16, dim=8, seed=5)
    feats = FeatureSet(ds.table, ds.frames)
    train(ds.graph, feats, TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, triplet_loss=False), tmp_path)
    vids = ds.graph.videos("test")
    S = score_videos(tmp_path / "final.ckpt", feats, vids)
    assert S.provenance == "mm"
    assert EntityId("video", vids[0].label) == vids[0]
