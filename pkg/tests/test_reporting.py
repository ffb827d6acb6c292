import io
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from PIL import Image

from uap.reporting import (
    CSV_HEADER,
    GenerationRecord,
    append_record,
    encode_png,
    export_attack_grid,
    export_perturbation_image,
    read_records,
    render_convergence_svg,
)
from uap.tensors import (
    DEFAULT_NORMALIZATION,
    ImageBatch,
    Perturbation,
    apply_perturbation,
    denormalize01,
    normalize01,
)

NORM = DEFAULT_NORMALIZATION


def record(generation=0, **overrides):
    base = dict(
        generation=generation,
        batch_id=0,
        best_gamma=0.25,
        best_l2_255=80.0,
        best_mse_255=41.5,
        mean_confidence_true=0.6,
        epsilon=85.0,
        p_cross=0.9,
        p_mut=0.6,
        wall_ms=12,
    )
    base.update(overrides)
    return GenerationRecord(**base)


def decode_png(data):
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"))


class TestMetricsCsv:
    def test_header_string(self):
        assert CSV_HEADER == (
            "generation,batch_id,best_gamma,best_l2_255,best_mse_255,"
            "mean_confidence_true,epsilon,p_cross,p_mut,wall_ms"
        )

    def test_append_read_round_trip(self, tmp_path):
        path = tmp_path / "metrics.csv"
        recs = [record(0), record(1, best_gamma=0.5, wall_ms=7), record(2, epsilon=83.7)]
        for r in recs:
            append_record(path, r)
        assert read_records(path) == recs

    def test_header_written_once(self, tmp_path):
        path = tmp_path / "metrics.csv"
        append_record(path, record(0))
        append_record(path, record(1))
        lines = path.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 3
        assert not any(line == CSV_HEADER for line in lines[1:])

    def test_nine_significant_digits(self, tmp_path):
        path = tmp_path / "metrics.csv"
        append_record(path, record(0, best_gamma=0.123456789123, best_l2_255=1.0 / 3.0))
        row = path.read_text().splitlines()[1].split(",")
        assert row[2] == "0.123456789"
        assert row[3] == "0.333333333"

    def test_integers_stay_integers(self, tmp_path):
        path = tmp_path / "metrics.csv"
        append_record(path, record(17, batch_id=3, wall_ms=250))
        row = path.read_text().splitlines()[1].split(",")
        assert row[0] == "17"
        assert row[1] == "3"
        assert row[9] == "250"


class TestPngEncoder:
    def test_round_trip_via_pillow(self, rng):
        for shape in [(1, 1, 3), (7, 5, 3), (16, 16, 3)]:
            rgb = rng.integers(0, 256, size=shape, dtype=np.uint8)
            assert np.array_equal(decode_png(encode_png(rgb)), rgb)

    def test_signature_and_chunk_layout(self, rng):
        data = encode_png(rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8))
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert data[12:16] == b"IHDR"
        # single IDAT chunk, then IEND
        assert data.count(b"IDAT") == 1
        assert data[-8:-4] == b"IEND"

    def test_byte_stable(self, rng):
        rgb = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        assert encode_png(rgb) == encode_png(rgb.copy())

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            encode_png(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ValueError):
            encode_png(np.zeros((4, 4, 4), dtype=np.uint8))


class TestPerturbationImage:
    def test_midgray_offset_formula(self, tmp_path):
        genes = np.zeros((3, 2, 2))
        genes[0, 0, 0] = 40.0 / (255.0 * NORM.std[0])  # +40 in pixel units
        genes[1, 0, 1] = -300.0 / (255.0 * NORM.std[1])  # clamps at -128
        genes[2, 1, 0] = 200.0 / (255.0 * NORM.std[2])  # clamps at +127
        path = tmp_path / "delta.png"
        export_perturbation_image(Perturbation(genes), NORM, path)
        img = decode_png(path.read_bytes())
        assert img[0, 0, 0] == 168  # 128 + 40
        assert img[0, 1, 1] == 0  # 128 - 128
        assert img[1, 0, 2] == 255  # 128 + 127
        assert img[1, 1, 0] == 128  # zero gene stays mid-gray

    def test_round_trip_within_half_level(self, tmp_path, rng):
        # noise within [-100, 100] pixel units survives the 128-offset image
        # encoding to within quantization error
        d255 = rng.uniform(-100, 100, size=(3, 4, 4))
        genes = d255 / (255.0 * np.array(NORM.std)[:, None, None])
        path = tmp_path / "delta.png"
        export_perturbation_image(Perturbation(genes), NORM, path)
        img = decode_png(path.read_bytes()).astype(np.float64).transpose(2, 0, 1)
        recovered = img - 128.0
        assert np.all(np.abs(recovered - d255) <= 0.5 + 1e-9)


class TestAttackGrid:
    def make_batch(self, rng, n=4, size=6):
        images01 = rng.uniform(0, 1, size=(n, 3, size, size))
        return ImageBatch(normalize01(images01, NORM), np.zeros(n, dtype=np.int64), 0)

    def test_geometry_and_tiles(self, tmp_path, rng):
        batch = self.make_batch(rng)
        delta = Perturbation(rng.uniform(-0.2, 0.2, size=(3, 6, 6)))
        path = tmp_path / "grid.png"
        export_attack_grid(batch, delta, NORM, path, rows=2, cols=2)
        img = decode_png(path.read_bytes())
        assert img.shape == (2 * 6 + 2, 2 * 6 + 2, 3)

        def quant(data):
            return np.clip(np.rint(denormalize01(data, NORM) * 255.0), 0, 255).astype(np.uint8)

        clean8 = quant(batch.data)
        attacked8 = quant(apply_perturbation(batch, delta, NORM).data)
        # column 0 holds the clean image, column 1 its attacked version
        assert np.array_equal(img[0:6, 0:6], clean8[0].transpose(1, 2, 0))
        assert np.array_equal(img[0:6, 8:14], attacked8[0].transpose(1, 2, 0))
        assert np.array_equal(img[8:14, 0:6], clean8[1].transpose(1, 2, 0))
        assert np.array_equal(img[8:14, 8:14], attacked8[1].transpose(1, 2, 0))
        # 2-pixel gutters stay black
        assert np.all(img[6:8, :] == 0)
        assert np.all(img[:, 6:8] == 0)

    def test_grid_larger_than_batch_rejected(self, tmp_path, rng):
        batch = self.make_batch(rng, n=3)
        delta = Perturbation(np.zeros((3, 6, 6)))
        with pytest.raises(ValueError, match="grid"):
            export_attack_grid(batch, delta, NORM, tmp_path / "g.png", rows=2, cols=2)

    def test_invalid_dimensions(self, tmp_path, rng):
        batch = self.make_batch(rng)
        delta = Perturbation(np.zeros((3, 6, 6)))
        with pytest.raises(ValueError):
            export_attack_grid(batch, delta, NORM, tmp_path / "g.png", rows=0, cols=2)


class TestConvergenceSvg:
    def render(self, history, tmp_path):
        path = tmp_path / "conv.svg"
        render_convergence_svg(history, path)
        return ET.fromstring(path.read_text())

    def test_four_titled_panels(self, tmp_path):
        history = [record(g, best_gamma=0.1 * g) for g in range(5)]
        root = self.render(history, tmp_path)
        ns = "{http://www.w3.org/2000/svg}"
        titles = [t.text for t in root.iter(f"{ns}text")]
        for expected in (
            "Perturbation Norm",
            "Average MSE",
            "Misclassification Rate",
            "Average Confidence Score",
        ):
            assert expected in titles
        assert len(root.findall(f".//{ns}polyline")) == 4

    def test_increasing_series_marches_up_the_panel(self, tmp_path):
        # SVG y grows downward, so an increasing metric must give a strictly
        # decreasing y sequence
        history = [
            record(g, best_gamma=0.1 + 0.2 * g, best_l2_255=50.0 + g) for g in range(4)
        ]
        root = self.render(history, tmp_path)
        ns = "{http://www.w3.org/2000/svg}"
        polylines = root.findall(f".//{ns}polyline")
        gamma_line = polylines[2]  # panel order: l2, mse, gamma, confidence
        ys = [float(p.split(",")[1]) for p in gamma_line.get("points").split()]
        assert all(a > b for a, b in zip(ys, ys[1:]))
        xs = [float(p.split(",")[0]) for p in gamma_line.get("points").split()]
        assert all(a < b for a, b in zip(xs, xs[1:]))

    def test_flat_series_centered(self, tmp_path):
        history = [record(g) for g in range(3)]
        root = self.render(history, tmp_path)
        ns = "{http://www.w3.org/2000/svg}"
        for line in root.findall(f".//{ns}polyline"):
            ys = {p.split(",")[1] for p in line.get("points").split()}
            assert len(ys) == 1  # constant metric renders a horizontal line

    def test_single_record_renders(self, tmp_path):
        root = self.render([record(0)], tmp_path)
        assert root.tag.endswith("svg")

    def test_empty_history_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="non-empty"):
            render_convergence_svg([], tmp_path / "conv.svg")
