import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from afif4.imagecore import (
    FEMALE,
    LANDMARK_GROUPS,
    MALE,
    MIRROR_PERMUTATION,
    DatasetManifest,
    ImageBuffer,
    ImageFormatError,
    LandmarkSet,
    ManifestError,
    Rect,
    SampleRecord,
    crop_resize,
    format_record,
    horizontal_flip,
    load_image,
    mean_intensity,
    parse_manifest,
    parse_manifest_text,
    resize,
    save_image,
    write_manifest,
)

unit_images = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3])),
                     elements=st.floats(0, 1))


def lm_line(rng):
    return "\t".join(f"{v:.3f}" for v in rng.uniform(1, 30, 34))


class TestImageBuffer:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2), 1.5))
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2), np.nan))
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((2, 2, 2)))

    def test_gray_promoted_and_immutable(self):
        img = ImageBuffer(np.zeros((2, 3)))
        assert img.shape == (2, 3, 1) and img.width == 3 and img.height == 2
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1.0

    def test_clamped(self):
        img = ImageBuffer.clamped([[-1.0, 2.0]])
        assert img.pixels.ravel().tolist() == [0.0, 1.0]


class TestIO:
    def test_white_and_black(self, tmp_path):
        Image.fromarray(np.full((2, 2), 255, np.uint8)).save(tmp_path / "w.png")
        Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "b.png")
        assert np.all(load_image(tmp_path / "w.png").pixels == 1.0)
        assert np.all(load_image(tmp_path / "b.png").pixels == 0.0)

    def test_round_trip_within_one_level(self, tmp_path, rng):
        for c in (1, 3):
            img = ImageBuffer(rng.random((7, 5, c)))
            save_image(img, tmp_path / f"r{c}.png")
            back = load_image(tmp_path / f"r{c}.png")
            assert back.shape == img.shape
            assert np.max(np.abs(back.pixels - img.pixels)) <= 1 / 255

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ImageFormatError):
            load_image(bad)
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "missing.png")


class TestFlip:
    def test_two_pixel(self):
        assert horizontal_flip(ImageBuffer([[0.2, 0.8]])).pixels.ravel().tolist() == [0.8, 0.2]

    def test_symmetric_image_fixed(self):
        img = ImageBuffer([[0.1, 0.5, 0.1], [0.3, 0.9, 0.3]])
        assert horizontal_flip(img) == img

    @given(unit_images)
    def test_involution(self, arr):
        img = ImageBuffer(arr)
        assert horizontal_flip(horizontal_flip(img)) == img

    @given(unit_images)
    def test_pixel_mapping(self, arr):
        img = ImageBuffer(arr)
        out = horizontal_flip(img)
        w = img.width
        for x in range(w):
            assert np.array_equal(out.pixels[:, x], img.pixels[:, w - 1 - x])


class TestCropResize:
    def test_identity(self, random_image):
        img = random_image(9, 13, 3)
        out = crop_resize(img, Rect.full(img), img.width, img.height)
        assert np.max(np.abs(out.pixels - img.pixels)) < 1e-9

    def test_constant(self):
        img = ImageBuffer.constant(10, 7, [0.2, 0.4, 0.6], channels=3)
        out = crop_resize(img, Rect(-3.2, 1.7, 8.1, 12.5), 5, 11)
        assert np.allclose(out.pixels, [0.2, 0.4, 0.6], atol=1e-12)

    def test_checkerboard_corner(self):
        board = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(float)
        img = ImageBuffer(board)
        for (x0, y0) in [(0, 0), (2, 0), (0, 2), (2, 2)]:
            out = crop_resize(img, Rect(x0, y0, x0 + 2, y0 + 2), 2, 2)
            assert np.array_equal(out.pixels[:, :, 0], board[y0:y0 + 2, x0:x0 + 2])

    def test_empty_intersection(self, random_image):
        img = random_image(8, 8, 1)
        with pytest.raises(ValueError):
            crop_resize(img, Rect(10, 10, 20, 20), 4, 4)
        with pytest.raises(ValueError):
            crop_resize(img, Rect(0, 0, 4, 4), 0, 4)

    def test_outside_clamps_to_border(self):
        img = ImageBuffer([[0.0, 1.0]])
        # Left half of the rect hangs off the image; its samples repeat column 0.
        out = crop_resize(img, Rect(-2, 0, 2, 1), 4, 1)
        assert out.pixels.ravel().tolist() == [0.0, 0.0, 0.0, 1.0]

    def test_downsample_averages(self):
        img = ImageBuffer([[0.0, 1.0, 0.0, 1.0]])
        out = resize(img, 2, 1)
        assert np.allclose(out.pixels.ravel(), [0.5, 0.5])

    @settings(max_examples=30)
    @given(unit_images, st.integers(1, 9), st.integers(1, 9))
    def test_range_preserved(self, arr, w, h):
        img = ImageBuffer(arr)
        out = resize(img, w, h)
        assert out.shape == (h, w, img.channels)
        assert out.pixels.min() >= arr.min() - 1e-12 and out.pixels.max() <= arr.max() + 1e-12


class TestMeanIntensity:
    def test_constant(self):
        assert np.allclose(mean_intensity(ImageBuffer.constant(3, 4, 0.37)), 0.37)

    def test_two_pixels(self):
        assert mean_intensity(ImageBuffer([[0.0, 1.0]]))[0] == 0.5

    def test_summation_oracle(self, random_image):
        img = random_image(11, 7, 3)
        for c in range(3):
            total = 0.0
            for y in range(img.height):
                for x in range(img.width):
                    total += img.pixels[y, x, c]
            assert abs(mean_intensity(img)[c] - total / (img.width * img.height)) < 1e-9


class TestGeometry:
    def test_groups_disjoint_and_cover(self):
        seen = [i for idx in LANDMARK_GROUPS.values() for i in idx]
        assert sorted(seen) == list(range(17))
        assert all(LANDMARK_GROUPS[g] for g in ("left-eye", "right-eye", "nose", "mouth", "face-outline"))

    def test_mirror_permutation_is_involution(self):
        perm = np.array(MIRROR_PERMUTATION)
        assert np.array_equal(perm[perm], np.arange(17))

    def test_landmark_mirror_involution(self, rng):
        lm = LandmarkSet(rng.uniform(0, 20, (17, 2)))
        assert np.allclose(lm.mirrored(20).mirrored(20).points, lm.points, rtol=0, atol=1e-12)

    def test_wrong_count(self):
        with pytest.raises(ValueError):
            LandmarkSet(np.zeros((16, 2)))

    def test_rect_mask_centers(self):
        mask = Rect(1, 1, 3, 2).pixel_mask(4, 3)
        assert mask.sum() == 2 and mask[1, 1] and mask[1, 2]

    def test_iou(self):
        assert Rect(0, 0, 2, 2).iou(Rect(1, 0, 3, 2)) == pytest.approx(1 / 3)
        assert Rect(0, 0, 1, 1).iou(Rect(5, 5, 6, 6)) == 0.0


class TestManifest:
    def test_empty(self):
        assert len(parse_manifest_text("")) == 0
        assert len(parse_manifest_text("# only a comment\n\n")) == 0

    def test_one_line(self):
        m = parse_manifest_text("a.png\tM\tsubj1\t3\n")
        rec = m.records[0]
        assert (rec.image_path, rec.gender, rec.subject_id, rec.fold, rec.landmarks) == \
            ("a.png", MALE, "subj1", 3, None)

    def test_landmarks_and_unassigned_fold(self, rng):
        m = parse_manifest_text(f"b.png\tF\ts\t-\t{lm_line(rng)}\n")
        assert m.records[0].gender == FEMALE and m.records[0].fold is None
        assert m.records[0].landmarks.points.shape == (17, 2)

    def test_sixteen_landmarks_names_line(self, rng):
        coords = "\t".join(["1.0"] * 32)
        text = f"# header\na.png\tM\ts\t0\nb.png\tF\ts\t0\t{coords}\n"
        with pytest.raises(ManifestError) as err:
            parse_manifest_text(text)
        assert err.value.line == 3 and "line 3" in str(err.value)

    @pytest.mark.parametrize("line", ["a.png\tX\ts\t0", "a.png\tM\ts\tq", "a.png\tM\ts\t-2",
                                      "a.png\tM", "\tM\ts\t0"])
    def test_malformed(self, line):
        with pytest.raises(ManifestError):
            parse_manifest_text(line + "\n")

    def test_duplicate(self):
        with pytest.raises(ManifestError) as err:
            parse_manifest_text("a.png\tM\ts\t0\na.png\tF\tt\t1\n")
        assert err.value.line == 2

    def test_write_parse_round_trip(self, tmp_path, rng):
        recs = tuple(SampleRecord(f"img{i}.png", MALE if i % 2 else FEMALE, f"s{i}",
                                  None if i == 0 else i, LandmarkSet(rng.uniform(0, 50, (17, 2))))
                     for i in range(4))
        write_manifest(DatasetManifest(recs, "demo"), tmp_path / "m.tsv")
        back = parse_manifest(tmp_path / "m.tsv")
        assert back.name == "demo"
        assert back.records == recs
        assert back.resolve(back.records[0]) == str(tmp_path / "img0.png")

    def test_format_record_fields(self):
        assert format_record(SampleRecord("x.png", FEMALE, "p", None)) == "x.png\tF\tp\t-"

    def test_check_folds(self):
        m = parse_manifest_text("a.png\tM\ts\t7\n")
        with pytest.raises(ManifestError):
            m.check_folds(5)

    @settings(max_examples=50)
    @given(st.text(alphabet="ab\t\n#MF0123456789.-", max_size=80))
    def test_total(self, text):
        try:
            parse_manifest_text(text)
        except ManifestError as exc:
            assert exc.line >= 1
