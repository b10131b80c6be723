import json
import struct

import numpy as np
import pytest
from sklearn.tree import DecisionTreeClassifier

from owtc import packets
from owtc.errors import EmptyPayloadError, FormatError, PartialReadError, ValidationError, VersionError
from owtc.packets import HEADER_STRIP, VECTOR_LENGTH, LabeledDataset, Packet


def frames():
    return [bytes(range(40)), b"\xaa" * 24 + b"\x01\x02\x03", bytes(100)]


def byte_histograms(ds):
    """Per-packet normalized histogram over byte values, zero padding excluded."""
    out = np.zeros((len(ds), 256))
    for i, (row, n) in enumerate(zip(ds.payload, ds.lengths)):
        out[i] = np.bincount(row[:n], minlength=256) / max(int(n), 1)
    return out


class TestPcap:
    @pytest.mark.parametrize("order", ["<", ">"])
    @pytest.mark.parametrize("ns", [False, True])
    def test_records_in_order(self, tmp_path, order, ns):
        path = tmp_path / "cap.pcap"
        packets.write_pcap(path, frames(), byte_order=order, nanosecond=ns, timestamps=[1_500_000, 2_250_000, 3_000_000])
        got = packets.ingest_pcap(path)
        assert [p.raw for p in got] == frames()
        assert [p.timestamp for p in got] == [1_500_000, 2_250_000, 3_000_000]

    def test_byte_swapped_equals_native(self, tmp_path):
        packets.write_pcap(tmp_path / "le.pcap", frames(), byte_order="<")
        packets.write_pcap(tmp_path / "be.pcap", frames(), byte_order=">")
        le = packets.ingest_pcap(tmp_path / "le.pcap")
        be = packets.ingest_pcap(tmp_path / "be.pcap")
        assert (tmp_path / "le.pcap").read_bytes() != (tmp_path / "be.pcap").read_bytes()
        assert [(p.raw, p.timestamp) for p in le] == [(p.raw, p.timestamp) for p in be]

    def test_header_only(self, tmp_path):
        packets.write_pcap(tmp_path / "empty.pcap", [])
        assert packets.ingest_pcap(tmp_path / "empty.pcap") == []

    def test_hand_built_big_endian(self, tmp_path):
        # independent encoder: global header then one 16-byte record header per frame
        body = b"\x00" * 24 + b"\xff"
        blob = struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
        blob += struct.pack(">IIII", 7, 8, len(body), len(body)) + body
        (tmp_path / "h.pcap").write_bytes(blob)
        (p,) = packets.ingest_pcap(tmp_path / "h.pcap")
        assert p.raw == body and p.timestamp == 7_000_008

    def test_unknown_magic(self, tmp_path):
        (tmp_path / "x.pcap").write_bytes(b"\x0a\x0d\x0d\x0a" + bytes(40))
        with pytest.raises(FormatError):
            packets.ingest_pcap(tmp_path / "x.pcap")

    def test_truncated_record_names_index(self, tmp_path):
        path = tmp_path / "cap.pcap"
        packets.write_pcap(path, frames())
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(PartialReadError) as err:
            packets.ingest_pcap(path)
        assert err.value.record_index == 2
        assert "record 2" in str(err.value)


class TestPreprocess:
    def test_header_only_packet_is_empty(self):
        with pytest.raises(EmptyPayloadError):
            packets.preprocess(Packet(bytes(24)))

    def test_single_payload_byte(self):
        v = packets.preprocess(Packet(bytes(24) + b"\xff"))
        assert v.shape == (VECTOR_LENGTH,)
        assert v[0] == 1.0 and not v[1:].any()

    def test_truncates_long_packets(self):
        raw = np.random.default_rng(0).integers(0, 256, 2000, dtype=np.uint8).tobytes()
        v = packets.preprocess(Packet(raw))
        np.testing.assert_array_equal(v, np.frombuffer(raw[HEADER_STRIP:HEADER_STRIP + VECTOR_LENGTH], np.uint8) / 255.0)

    def test_range_and_padding(self):
        rng = np.random.default_rng(1)
        for n in [25, 100, 1479, 1480, 1481, 3000]:
            v = packets.preprocess(Packet(rng.integers(0, 256, n, dtype=np.uint8).tobytes()))
            assert v.shape == (VECTOR_LENGTH,) and v.min() >= 0 and v.max() <= 1
            assert not v[n - HEADER_STRIP:].any()

    def test_empty_payloads_are_skipped_and_counted(self):
        ds, skipped = packets.packets_to_dataset([Packet(bytes(10)), Packet(bytes(30)), Packet(bytes(24))], label=3)
        assert skipped == 2 and len(ds) == 1
        assert ds.lengths[0] == 6 and ds.labels[0] == 3


class TestExport:
    def test_zero_vector_is_black(self):
        assert not packets.reshape_for_export(np.zeros(VECTOR_LENGTH)).any()

    def test_top_left_pixel(self):
        v = np.zeros(VECTOR_LENGTH)
        v[0] = 1.0
        assert packets.reshape_for_export(v)[0, 0] == 255
        assert packets.reshape_for_export(v, "rgb_22x22x3")[0, 0, 0] == 255

    def test_gray_has_65_trailing_zero_cells(self):
        img = packets.reshape_for_export(np.ones(VECTOR_LENGTH))
        assert img.shape == (39, 39)
        flat = img.reshape(-1)
        assert np.count_nonzero(flat == 0) == 65 and not flat[VECTOR_LENGTH:].any()

    def test_round_trip(self):
        v = np.random.default_rng(2).integers(0, 256, VECTOR_LENGTH) / 255.0
        back = packets.flatten_export(packets.reshape_for_export(v))
        np.testing.assert_array_equal(back[:VECTOR_LENGTH], v)
        rgb = packets.flatten_export(packets.reshape_for_export(v, "rgb_22x22x3"))
        assert rgb.shape == (1452,)
        np.testing.assert_array_equal(rgb, v[:1452])

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            packets.reshape_for_export(np.zeros(VECTOR_LENGTH), "hsv")


class TestSynth:
    def test_counts(self):
        ds = packets.synth_generate(packets.default_profiles(2), 100, seed=0)
        assert len(ds) == 200 and ds.class_counts() == {0: 100, 1: 100}
        assert ds.class_names == {0: "app0", 1: "app1"}

    def test_deterministic(self):
        profiles = packets.default_profiles(3)
        a = packets.synth_generate(profiles, 20, seed=5)
        b = packets.synth_generate(packets.default_profiles(3), 20, seed=5)
        assert packets.dataset_to_bytes(a) == packets.dataset_to_bytes(b)
        c = packets.synth_generate(profiles, 20, seed=6)
        assert packets.dataset_to_bytes(a) != packets.dataset_to_bytes(c)

    def test_duplicate_ids(self):
        p = packets.SynthAppProfile("dup", 1)
        with pytest.raises(ValidationError):
            packets.synth_generate([p, packets.SynthAppProfile("dup", 2)], 5, 0)

    def test_needs_two_profiles_and_positive_count(self):
        with pytest.raises(ValidationError):
            packets.synth_generate(packets.default_profiles(1), 5, 0)
        with pytest.raises(ValidationError):
            packets.synth_generate(packets.default_profiles(2), 0, 0)

    def test_lengths_respected(self):
        p = packets.SynthAppProfile("a", 3, length_min=100, length_max=300, length_mode=200)
        body, lengths = p.sample_payloads(np.random.default_rng(0), 50)
        assert lengths.min() >= 100 and lengths.max() <= 300
        for row, n in zip(body, lengths):
            assert not row[n:].any()

    def test_profiles_differ_in_total_variation(self):
        profiles = packets.default_profiles(6)
        ds = packets.synth_generate(profiles, 60, seed=0)
        hist = byte_histograms(ds)
        means = np.stack([hist[ds.labels == c].mean(axis=0) for c in range(6)])
        for i in range(6):
            for j in range(i + 1, 6):
                assert 0.5 * np.abs(means[i] - means[j]).sum() > 0.05

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_depth2_tree_separates_far_apart_profiles(self, seed):
        profiles = packets.default_profiles(6)
        far = [profiles[0], profiles[max(range(1, 6), key=lambda i: abs(profiles[i].band_center - profiles[0].band_center))]]
        train = packets.synth_generate(far, 150, seed=seed)
        test = packets.synth_generate(far, 150, seed=seed + 100)
        tree = DecisionTreeClassifier(max_depth=2, random_state=0).fit(byte_histograms(train), train.labels)
        assert tree.score(byte_histograms(test), test.labels) >= 0.9

    def test_profile_config_file(self, tmp_path):
        cfg = tmp_path / "p.json"
        cfg.write_text(json.dumps({"profiles": [p.to_dict() for p in packets.default_profiles(2)]}))
        assert [p.to_dict() for p in packets.load_profiles(cfg)] == [p.to_dict() for p in packets.default_profiles(2)]
        cfg.write_text(json.dumps({"default": 4}))
        assert len(packets.load_profiles(cfg)) == 4
        cfg.write_text(json.dumps({"nothing": 1}))
        with pytest.raises(ValidationError):
            packets.load_profiles(cfg)

    def test_invalid_profile(self):
        with pytest.raises(ValidationError):
            packets.SynthAppProfile("a", 1, length_min=500, length_mode=100)


class TestDatasetFile:
    def make(self):
        rng = np.random.default_rng(0)
        return LabeledDataset(rng.integers(0, 256, (7, VECTOR_LENGTH)), [0, 1, 1, -1, 2, 0, -1],
                              rng.integers(1, VECTOR_LENGTH + 1, 7), {0: "a", 1: "b", 2: "c"})

    def test_round_trip(self, tmp_path):
        d = self.make()
        packets.write_dataset(d, tmp_path / "d.owtc")
        back = packets.read_dataset(tmp_path / "d.owtc")
        assert back.equals(d)
        assert packets.dataset_to_bytes(back) == (tmp_path / "d.owtc").read_bytes()

    def test_layout(self):
        d = self.make()
        blob = packets.dataset_to_bytes(d)
        assert blob[:4] == b"OWTC"
        assert struct.unpack_from("<HI", blob, 4) == (1, 7)
        assert len(blob) == 10 + 7 * (4 + 2 + VECTOR_LENGTH)
        label, length = struct.unpack_from("<iH", blob, 10 + 3 * 1462)
        assert label == -1 and length == d.lengths[3]

    def test_unlabeled_sentinel(self):
        d = packets.dataset_from_bytes(packets.dataset_to_bytes(self.make()))
        np.testing.assert_array_equal(d.labeled_mask, [1, 1, 1, 0, 1, 1, 0])
        assert d.class_count == 3
        with pytest.raises(ValidationError):
            d.check_dense()

    def test_bad_magic(self):
        blob = bytearray(packets.dataset_to_bytes(self.make()))
        blob[0:4] = b"XXXX"
        with pytest.raises(FormatError):
            packets.dataset_from_bytes(bytes(blob))

    def test_version(self):
        blob = bytearray(packets.dataset_to_bytes(self.make()))
        blob[4] = 9
        with pytest.raises(VersionError):
            packets.dataset_from_bytes(bytes(blob))

    def test_truncated_and_trailing(self):
        blob = packets.dataset_to_bytes(self.make())
        for cut in [3, 9, 11, len(blob) - 1]:
            with pytest.raises(FormatError):
                packets.dataset_from_bytes(blob[:cut])
        with pytest.raises(FormatError):
            packets.dataset_from_bytes(blob + b"\x00")

    def test_labels_below_sentinel_rejected(self):
        with pytest.raises(ValidationError):
            LabeledDataset(np.zeros((1, VECTOR_LENGTH)), [-2])
