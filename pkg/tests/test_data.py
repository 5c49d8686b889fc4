import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from far import data as D


def spec(**kw):
    base = dict(domain_id=0, style_shift=(0.0, 0.2, -0.1), style_scale=(1.0, 1.0, 1.0), rho=0.5, noise_std=0.3)
    base.update(kw)
    return D.DomainSpec(**base)


def best_stump(x, y):
    """Exhaustive threshold search, either polarity."""
    best = 0.0
    for t in np.unique(x):
        pred = (x >= t).astype(int)
        best = max(best, (pred == y).mean(), (1 - pred == y).mean())
    return best


class TestGenerate:
    def test_shape_and_dtype(self):
        ds = D.generate(spec(), 40, 4, seed=1)
        assert ds.images.shape == (40, 3, 16, 16) and ds.images.dtype == np.float32
        assert ds.labels.shape == (40,)

    def test_deterministic(self):
        a = D.generate(spec(noise_std=0.0), 30, 3, seed=9)
        b = D.generate(spec(noise_std=0.0), 30, 3, seed=9)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_seed_matters(self):
        a = D.generate(spec(), 30, 3, seed=1)
        b = D.generate(spec(), 30, 3, seed=2)
        assert not np.array_equal(a.images, b.images)

    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(4, 60), k=st.integers(1, 4), seed=st.integers(0, 999))
    def test_balanced(self, n, k, seed):
        counts = np.bincount(D.generate(spec(), n, k, seed).labels, minlength=k)
        assert counts.max() - counts.min() <= 1

    def test_stump_on_texture_is_perfect(self):
        ds = D.generate(spec(rho=1.0, noise_std=0.0), 64, 2, seed=3)
        assert best_stump(ds.images[:, 1].mean(axis=(1, 2)), ds.labels) == 1.0

    def test_rho_zero_texture_ignores_label(self):
        # with rho=0 the texture value is drawn before and independently of the label code
        a = D.generate(spec(rho=0.0, noise_std=0.0), 200, 4, seed=5)
        codes = D.class_codes(4)[a.labels]
        s = (a.images[:, 1, 0, 0] - 0.2)
        assert np.all(np.abs(s) <= 1.0 + 1e-6)
        b = D.generate(spec(rho=0.0, noise_std=0.0), 200, 4, seed=5)
        assert np.array_equal(s, b.images[:, 1, 0, 0] - 0.2)
        assert abs(np.corrcoef(s, codes)[0, 1]) < 0.2

    def test_texture_only_classifier_at_chance(self):
        # nearest class-mean on channel 1-2 means, trained and tested on fresh rho=0 draws
        accs = []
        for seed in range(5):
            tr = D.generate(spec(rho=0.0), 512, 4, seed=100 + seed)
            te = D.generate(spec(rho=0.0), 512, 4, seed=200 + seed)
            feat = lambda d: d.images[:, 1:].mean(axis=(2, 3))
            centers = np.stack([feat(tr)[tr.labels == k].mean(0) for k in range(4)])
            pred = np.argmin(((feat(te)[:, None] - centers[None]) ** 2).sum(-1), axis=1)
            accs.append((pred == te.labels).mean())
        assert np.mean(accs) <= 0.25 + 0.05

    def test_shape_channel_shared_across_domains(self):
        a = D.generate(spec(style_shift=(0, 0.5, 0.5), noise_std=0), 8, 4, seed=0)
        b = D.generate(spec(style_shift=(0, -0.5, 0.1), style_scale=(1, 2, 2), noise_std=0), 8, 4, seed=0)
        assert np.array_equal(a.images[:, 0], b.images[:, 0])

    def test_blob_peak_at_class_center(self):
        ds = D.generate(spec(noise_std=0.0), 8, 4, seed=0)
        centers = D.class_centers(4, 16, 16)
        for img, y in zip(ds.images, ds.labels):
            r, c = np.unravel_index(np.argmax(img[0]), img[0].shape)
            assert abs(r - centers[y][0]) <= 1 and abs(c - centers[y][1]) <= 1

    @pytest.mark.parametrize("bad", [dict(rho=1.5), dict(style_scale=(1, 0, 1)), dict(noise_std=-1)])
    def test_invalid_spec(self, bad):
        with pytest.raises(D.ConfigError):
            D.generate(spec(**bad), 10, 2, seed=0)

    def test_too_few_samples(self):
        with pytest.raises(D.ConfigError):
            D.generate(spec(), 3, 4, seed=0)

    def test_digest_stable(self):
        assert spec().digest() == spec().digest() != spec(rho=0.4).digest()


@pytest.fixture(scope="module")
def domains():
    return [D.generate(s, 20, 4, seed=s.domain_id) for s in D.default_domains()]


class TestLeaveOneOut:
    def test_counts(self, domains):
        src, tgt = D.leave_one_domain_out(domains, 2)
        assert len(src) == 3 and tgt.domain_id == 2

    def test_each_target_once(self, domains):
        targets = [D.leave_one_domain_out(domains, i)[1].domain_id for i in range(4)]
        assert sorted(targets) == [0, 1, 2, 3]

    def test_uda_strips_labels(self, domains):
        _, tgt = D.leave_one_domain_out(domains, 3, mode="uda")
        assert not tgt.has_labels and len(tgt) == 20

    def test_dg_target_never_batched(self, domains):
        src, tgt = D.leave_one_domain_out(domains, 1, mode="dg")
        rng = np.random.default_rng(0)
        for b in D.epoch_batches(src, None, 4, rng):
            assert {blk.domain_id for blk in b.blocks}.isdisjoint({tgt.domain_id})

    def test_unknown(self, domains):
        with pytest.raises(D.ContractError):
            D.leave_one_domain_out(domains, 9)


class TestSampler:
    def test_counts(self, domains):
        b = D.sample_batch(domains[:3], domains[3].unlabeled(), 2, np.random.default_rng(0))
        assert b.images.shape[0] == 8
        assert (b.labels >= 0).sum() == 6 and (b.labels == -1).sum() == 2
        assert b.m == 2 and b.target_block.domain_id == 3

    def test_no_replacement_within_block(self, domains):
        b = D.sample_batch(domains[:3], None, 10, np.random.default_rng(1))
        for blk in b.blocks:
            assert len(set(blk.sample_ids.tolist())) == 10

    def test_reproducible(self, domains):
        a = D.sample_batch(domains[:3], None, 4, np.random.default_rng(7))
        b = D.sample_batch(domains[:3], None, 4, np.random.default_rng(7))
        assert np.array_equal(a.images, b.images)

    def test_epoch_coverage(self, domains):
        m = 3
        seen = {d.domain_id: np.zeros(len(d), int) for d in domains}
        for b in D.epoch_batches(domains[:3], domains[3], m, np.random.default_rng(2)):
            for blk in b.blocks:
                np.add.at(seen[blk.domain_id], blk.sample_ids, 1)
        for counts in seen.values():
            assert counts.max() <= 1
            assert counts.sum() == (20 // m) * m

    def test_m_too_large(self, domains):
        with pytest.raises(D.ContractError):
            D.sample_batch(domains[:3], None, 21, np.random.default_rng(0))

    def test_m_too_small(self, domains):
        with pytest.raises(D.ContractError):
            D.sample_batch(domains[:3], None, 1, np.random.default_rng(0))


class TestFard:
    def test_round_trip(self, tmp_path, domains):
        path = tmp_path / "d.fard"
        D.save(domains[1], path)
        back = D.load(path)
        assert back.images.tobytes() == domains[1].images.tobytes()
        assert np.array_equal(back.labels, domains[1].labels)
        assert (back.domain_id, back.n_classes) == (1, 4)

    def test_round_trip_unlabeled(self, tmp_path, domains):
        path = tmp_path / "t.fard"
        D.save(domains[3].unlabeled(), path)
        assert not D.load(path).has_labels

    def test_header_layout(self, tmp_path, domains):
        path = tmp_path / "d.fard"
        D.save(domains[0], path)
        raw = path.read_bytes()
        assert raw[:4] == b"FARD"
        assert struct.unpack_from("<I", raw, 4)[0] == 1 and raw[8] == 1
        assert struct.unpack_from("<IIIIII", raw, 9) == (20, 3, 16, 16, 4, 0)
        assert raw[33] == 1
        assert len(raw) == 34 + 20 * 3 * 16 * 16 * 4 + 20 * 4

    def test_bad_magic(self, domains):
        raw = bytearray(D.to_bytes(domains[0]))
        raw[0:4] = b"XXXX"
        with pytest.raises(D.FormatError) as e:
            D.from_bytes(bytes(raw))
        assert e.value.offset == 0

    def test_truncated(self, domains):
        raw = D.to_bytes(domains[0])
        with pytest.raises(D.FormatError):
            D.from_bytes(raw[:-3])

    def test_version(self, domains):
        raw = bytearray(D.to_bytes(domains[0]))
        raw[4:8] = struct.pack("<I", 7)
        with pytest.raises(D.FormatError) as e:
            D.from_bytes(bytes(raw))
        assert e.value.offset == 4

    def test_hand_built_big_endian(self):
        images = np.arange(2 * 3 * 8 * 8, dtype=np.float32).reshape(2, 3, 8, 8) / 7
        raw = struct.pack(">4sIBIIIIIIB", b"FARD", 1, 0, 2, 3, 8, 8, 2, 5, 1)
        raw += images.astype(">f4").tobytes() + np.array([1, 0], ">u4").tobytes()
        ds = D.from_bytes(raw)
        assert ds.images.tobytes() == images.tobytes()
        assert ds.labels.tolist() == [1, 0] and ds.domain_id == 5

    def test_big_endian_writer_matches(self, domains):
        ds = D.from_bytes(D.to_bytes(domains[2], big_endian=True))
        assert ds.images.tobytes() == domains[2].images.tobytes()
