import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from robustkit.dataio import (
    PIXELS,
    DataFormatError,
    Dataset,
    MixupSchedule,
    decode_records,
    encode_records,
    load_cifar,
    mixup_batches,
    read_cifar_file,
    synth_dataset,
    write_cifar_file,
)
from robustkit.model import fit_reference_cnn


def _records(labels, fill=0, variant="cifar10"):
    out = bytearray()
    for lab in labels:
        if variant == "cifar100":
            out += bytes([3, lab])
        else:
            out += bytes([lab])
        out += bytes([fill]) * PIXELS
    return bytes(out)


def test_full_size_file_gives_10000_images(tmp_path):
    raw = np.zeros((10000, 3073), np.uint8)
    raw[:, 0] = np.arange(10000) % 10
    path = tmp_path / "test_batch.bin"
    path.write_bytes(raw.tobytes())
    assert path.stat().st_size == 30_730_000
    ds = read_cifar_file(path)
    assert ds.images.shape == (10000, 3, 32, 32) and ds.class_count == 10


def test_label_and_pixel_decoding():
    ds = decode_records(_records([7], fill=255), "cifar10")
    assert ds.labels.tolist() == [7]
    assert ds.images.min().item() == 1.0 and ds.images.max().item() == 1.0


def test_channel_planes_are_row_major():
    rec = bytearray([1]) + bytes(range(256)) * 12
    ds = decode_records(bytes(rec), "cifar10")
    assert ds.images[0, 0, 0, 5].item() == pytest.approx(5 / 255)
    assert ds.images[0, 1, 0, 0].item() == 0.0  # G plane restarts at offset 1024
    assert ds.images[0, 0, 1, 0].item() == pytest.approx(32 / 255)


def test_cifar100_uses_fine_label():
    ds = decode_records(_records([42, 99], variant="cifar100"), "cifar100")
    assert ds.labels.tolist() == [42, 99] and ds.class_count == 100


def test_bad_length_reports_byte_counts():
    with pytest.raises(DataFormatError, match="3073"):
        decode_records(b"\x00" * 3074, "cifar10")


def test_label_out_of_range():
    with pytest.raises(DataFormatError, match="label byte 10"):
        decode_records(_records([3, 10]), "cifar10")


def test_round_trip(tmp_path):
    ds = synth_dataset(0, 40)
    for variant in ("cifar10", "cifar100"):
        path = tmp_path / variant
        write_cifar_file(ds, path, variant)
        back = read_cifar_file(path, variant)
        assert torch.equal(back.images, ds.images) and torch.equal(back.labels, ds.labels)
    assert encode_records(decode_records(encode_records(ds, "cifar10"), "cifar10"), "cifar10") == encode_records(ds, "cifar10")


def test_load_cifar_directory_layout(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    for i in range(1, 6):
        (d / f"data_batch_{i}.bin").write_bytes(_records([i, i + 1]))
    (d / "test_batch.bin").write_bytes(_records([0]))
    train = load_cifar(tmp_path, "cifar10", "train")
    assert len(train) == 10 and train.labels[:4].tolist() == [1, 2, 2, 3]
    assert len(load_cifar(d, "cifar10", "test")) == 1
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path / "nowhere")


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        Dataset(torch.zeros(2, 3, 4, 4), torch.tensor([0, 5]), 5)
    with pytest.raises(DataFormatError):
        Dataset(torch.full((1, 3, 4, 4), 1.5), torch.tensor([0]), 2)


def test_synth_is_deterministic_and_balanced():
    a, b = synth_dataset(3, 100), synth_dataset(3, 100)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert np.bincount(a.labels.numpy(), minlength=10).tolist() == [10] * 10
    assert not torch.equal(a.images, synth_dataset(4, 100).images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    with pytest.raises(ValueError):
        synth_dataset(0, 5, 10)


def test_synth_is_learnable_by_reference_cnn():
    _, accs = fit_reference_cnn(synth_dataset(0, 5000), epochs=5, seed=0)
    assert max(accs) > 0.8, accs


def test_pairing_schedule():
    s = MixupSchedule(seed=5)
    assert np.array_equal(s.pairing(50, 0), s.pairing(50, 19))
    assert not np.array_equal(s.pairing(50, 19), s.pairing(50, 20))
    assert np.array_equal(s.proportions(50, 5), s.proportions(50, 9))
    assert not np.array_equal(s.proportions(50, 4), s.proportions(50, 5))


def test_mixup_p_zero_is_identity():
    ds = synth_dataset(0, 30)
    s = MixupSchedule(proportion_range=(0.0, 0.0))
    for mixed, y, y2, p, idx in mixup_batches(ds, s, 0, 8):
        assert torch.equal(mixed, ds.images[idx]) and torch.equal(y, ds.labels[idx])


def test_mixup_schedule_rejects_bad_range():
    with pytest.raises(ValueError):
        MixupSchedule(proportion_range=(0.1, 0.6))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), epoch=st.integers(0, 100), bs=st.integers(1, 20))
def test_mixup_convexity_and_range(seed, epoch, bs):
    ds = synth_dataset(1, 20)
    s = MixupSchedule(seed=seed)
    partner = torch.from_numpy(s.pairing(20, epoch))
    seen = []
    for mixed, y, y2, p, idx in mixup_batches(ds, s, epoch, bs):
        assert ((p >= 0) & (p <= 0.5)).all()
        x, x2 = ds.images[idx], ds.images[partner[idx]]
        lo, hi = torch.minimum(x, x2), torch.maximum(x, x2)
        assert (mixed >= lo - 1e-7).all() and (mixed <= hi + 1e-7).all()
        assert torch.equal(y2, ds.labels[partner[idx]])
        seen.append(idx)
    assert sorted(torch.cat(seen).tolist()) == list(range(20))


def test_batch_stream_is_reproducible():
    ds = synth_dataset(2, 40)
    s = MixupSchedule(seed=1)
    a = [m for m, *_ in mixup_batches(ds, s, 3, 16)]
    b = [m for m, *_ in mixup_batches(ds, s, 3, 16)]
    assert all(torch.equal(u, v) for u, v in zip(a, b))
