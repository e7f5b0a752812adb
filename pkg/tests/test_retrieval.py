"""Search, average precision, image rasters and benchmark plumbing."""

import numpy as np
import pytest

from qnip.descriptor import Descriptor, binarize_descriptor, quantize_descriptor
from qnip.retrieval import (
    average_precision,
    build_index,
    evaluate,
    holidays_group,
    ingest_dataset,
    mean_average_precision,
    read_ground_truth,
    read_image,
    search,
    write_ground_truth,
    write_image,
    write_results_csv,
)


def test_average_precision_hand_cases():
    assert average_precision(["b", "a"], {"b"}) == 1.0
    assert average_precision(["a", "b"], {"b"}) == 0.5
    # hits at ranks 1 and 3: (1/2) * (1/1 + 2/3)
    assert abs(average_precision(["a", "b", "c"], {"a", "c"}) - 5.0 / 6.0) <= 1e-12
    assert average_precision(["a", "b"], {"x"}) == 0.0
    assert average_precision([], {"x"}) == 0.0


def test_average_precision_requires_relevant_set():
    with pytest.raises(ValueError):
        average_precision(["a"], set())


def _real_index():
    # four 2-d unit vectors at known angles to the query direction (1, 0)
    entries = {
        "q": Descriptor("real", np.array([1.0, 0.0])),
        "close": Descriptor("real", np.array([0.9, np.sqrt(1 - 0.81)])),
        "mid": Descriptor("real", np.array([0.5, np.sqrt(0.75)])),
        "far": Descriptor("real", np.array([0.0, 1.0])),
    }
    return build_index(entries), entries


def test_search_orders_by_cosine():
    index, entries = _real_index()
    ranked = search(index, entries["q"], exclude="q")
    assert [name for name, _ in ranked] == ["close", "mid", "far"]
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)
    assert abs(ranked[0][1] - 0.9) <= 1e-12


def test_search_exclude_and_k():
    index, entries = _real_index()
    assert len(search(index, entries["q"])) == 4
    assert len(search(index, entries["q"], k=2)) == 2
    with pytest.raises(ValueError):
        search(index, entries["q"], k=0)


def test_search_tie_break_is_lexicographic():
    entries = {
        "b": Descriptor("real", np.array([1.0, 0.0])),
        "a": Descriptor("real", np.array([1.0, 0.0])),
        "c": Descriptor("real", np.array([0.0, 1.0])),
    }
    index = build_index(entries)
    ranked = search(index, Descriptor("real", np.array([1.0, 0.0])))
    assert [name for name, _ in ranked] == ["a", "b", "c"]


def test_search_precision_and_dim_mismatch():
    index, entries = _real_index()
    with pytest.raises(ValueError):
        search(index, binarize_descriptor(entries["q"]))
    with pytest.raises(ValueError):
        search(index, Descriptor("real", np.array([1.0, 0.0, 0.0])))


def test_byte_search_matches_real_ordering():
    rng = np.random.default_rng(40)
    reals = {f"v{i}": Descriptor("real", rng.uniform(0, 1, 16)) for i in range(8)}
    bytes_ = {k: quantize_descriptor(d) for k, d in reals.items()}
    q = "v0"
    real_rank = [n for n, _ in search(build_index(reals), reals[q], exclude=q)]
    byte_rank = [n for n, _ in search(build_index(bytes_), bytes_[q], exclude=q)]
    # 8-bit quantization barely moves cosine scores on well-spread vectors
    assert real_rank[:3] == byte_rank[:3]


def test_hamming_search_matches_sign_cosine_ordering():
    # on +-1 vectors cosine is a monotone map of Hamming distance:
    # cos = (n - 2h) / n, so both rankings agree
    rng = np.random.default_rng(41)
    bits = {f"v{i}": Descriptor("bit", rng.integers(0, 2, 32).astype(np.uint8))
            for i in range(10)}
    signs = {k: Descriptor("real", d.values.astype(np.float64) * 2.0 - 1.0)
             for k, d in bits.items()}
    q = "v0"
    bit_rank = [n for n, _ in search(build_index(bits), bits[q], exclude=q)]
    sign_rank = [n for n, _ in search(build_index(signs), signs[q], exclude=q)]
    assert bit_rank == sign_rank


def test_hamming_scores_are_integer_counts():
    a = Descriptor("bit", np.array([1, 0, 1, 0], np.uint8))
    b = Descriptor("bit", np.array([1, 1, 0, 0], np.uint8))
    index = build_index({"a": a, "b": b})
    ranked = search(index, a)
    assert ranked[0] == ("a", 0)
    assert ranked[1] == ("b", 2)


def test_mean_average_precision_and_evaluate():
    index, entries = _real_index()
    ground_truth = {"q": ["close"], "far": ["mid"]}
    mean_ap, per_query = evaluate(index, ground_truth)
    assert set(per_query) == {"q", "far"}
    assert per_query["q"] == 1.0
    assert abs(mean_ap - np.mean(list(per_query.values()))) <= 1e-12
    assert mean_average_precision(index, ground_truth) == mean_ap


def test_evaluate_excludes_query_from_its_ranking():
    entries = {
        "q": Descriptor("real", np.array([1.0, 0.0])),
        "rel": Descriptor("real", np.array([0.9, np.sqrt(1 - 0.81)])),
    }
    _, per_query = evaluate(build_index(entries), {"q": ["rel"]})
    assert per_query["q"] == 1.0  # "q" itself does not occupy rank 1


def test_build_index_validation():
    with pytest.raises(ValueError):
        build_index({})
    with pytest.raises(ValueError):
        build_index({"a": Descriptor("real", np.zeros(3)),
                     "b": Descriptor("real", np.zeros(4))})
    with pytest.raises(ValueError):
        build_index({"a": Descriptor("real", np.zeros(3)),
                     "b": Descriptor("bit", np.zeros(3, np.uint8))})


def test_image_raster_round_trip(tmp_path):
    image = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 23.0
    path = tmp_path / "img.img"
    write_image(path, image)
    data = path.read_bytes()
    assert data[:4] == b"IMG1"
    assert len(data) == 10 + 24
    loaded = read_image(path)
    # stored as uint8 codes: exact on the 255ths grid
    assert np.max(np.abs(loaded - image)) <= 0.5 / 255.0
    write_image(path, loaded)
    assert np.array_equal(read_image(path), loaded)


def test_write_image_clips_out_of_range():
    path_dir = np.array([[[1.5, -0.2], [0.5, 1.0]]])
    from pathlib import Path
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "c.img"
        write_image(path, path_dir)
        loaded = read_image(path)
        assert loaded[0, 0, 0] == 1.0
        assert loaded[0, 0, 1] == 0.0


def test_read_image_errors(tmp_path):
    good = tmp_path / "ok.img"
    write_image(good, np.zeros((1, 2, 2)))
    raw = good.read_bytes()
    bad_magic = tmp_path / "bad.img"
    bad_magic.write_bytes(b"IMGX" + raw[4:])
    with pytest.raises(ValueError):
        read_image(bad_magic)
    short = tmp_path / "short.img"
    short.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        read_image(short)
    long = tmp_path / "long.img"
    long.write_bytes(raw + b"\x00")
    with pytest.raises(ValueError):
        read_image(long)


def test_holidays_group_rule():
    assert holidays_group("1000") == "10"
    assert holidays_group("1001") == "10"
    assert holidays_group("129099") == "1290"
    assert holidays_group("7") == "7"


def test_ingest_dataset_groups_and_queries(tmp_path):
    rng = np.random.default_rng(42)
    for name in ("1000", "1001", "1002", "2000", "2001"):
        write_image(tmp_path / f"{name}.img", rng.uniform(0, 1, (3, 4, 4)))
    images, ground_truth = ingest_dataset(tmp_path)
    assert sorted(images) == ["1000", "1001", "1002", "2000", "2001"]
    assert ground_truth == {"1000": ["1001", "1002"], "2000": ["2001"]}


def test_ingest_dataset_warns_on_single_image_group(tmp_path):
    rng = np.random.default_rng(43)
    for name in ("1000", "1001", "3000"):
        write_image(tmp_path / f"{name}.img", rng.uniform(0, 1, (1, 2, 2)))
    with pytest.warns(UserWarning):
        _, ground_truth = ingest_dataset(tmp_path)
    assert list(ground_truth) == ["1000"]


def test_ingest_dataset_empty_directory(tmp_path):
    with pytest.raises(ValueError):
        ingest_dataset(tmp_path)


def test_ground_truth_file_round_trip(tmp_path):
    path = tmp_path / "gt.txt"
    ground_truth = {"1000": ["1001", "1002"], "2000": ["2001"]}
    write_ground_truth(path, ground_truth)
    assert read_ground_truth(path) == ground_truth
    text = path.read_text()
    assert "1000: 1001 1002" in text


def test_read_ground_truth_rejects_malformed(tmp_path):
    path = tmp_path / "gt.txt"
    path.write_text("not a mapping\n")
    with pytest.raises(ValueError):
        read_ground_truth(path)


def test_write_results_csv(tmp_path):
    path = tmp_path / "results.csv"
    write_results_csv(path, {"q1": [("a", 0.912345), ("b", 0.5)]})
    lines = path.read_text().splitlines()
    assert lines[0] == "query_id,rank,id,score"
    assert lines[1] == "q1,1,a,0.912345"
    assert lines[2] == "q1,2,b,0.500000"
    write_results_csv(path, {"q1": [("a", 3)]}, bitwise=True)
    assert path.read_text().splitlines()[1] == "q1,1,a,3"
