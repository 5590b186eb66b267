from pathlib import Path

import numpy as np
import pytest

from tinyron.domain.errors import FormatError, InputError, StorageError
from tinyron.domain.models import Annotation, Box, GroundTruth
from tinyron.formats import (
    decode_ppm,
    encode_ppm,
    parse_voc,
    read_ppm,
    read_voc,
    resize,
    write_ppm,
    write_voc,
)

CLASSES = ("circle", "square")

_VOC = """<annotation>
  <filename>000042.jpg</filename>
  <size><width>100</width><height>80</height><depth>3</depth></size>
  <object>
    <name>square</name>
    <difficult>1</difficult>
    <bndbox><xmin>11</xmin><ymin>21</ymin><xmax>30</xmax><ymax>40</ymax></bndbox>
  </object>
  <object>
    <name>circle</name>
    <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>100</xmax><ymax>80</ymax></bndbox>
  </object>
</annotation>
"""


def test_decode_ppm_with_comments() -> None:
    """Header comments are skipped; samples land channel-first."""
    data = b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])
    image = decode_ppm(data)
    assert image.shape == (3, 1, 2)
    np.testing.assert_array_equal(image[:, 0, 0], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(image[:, 0, 1], [0.0, 0.0, 1.0])


def test_decode_ppm_scales_by_maxval() -> None:
    """Samples are divided by maxval, not 255."""
    image = decode_ppm(b"P6 1 1 15\n" + bytes([15, 5, 0]))
    np.testing.assert_allclose(image[:, 0, 0], [1.0, 1 / 3, 0.0])


def test_encode_ppm_rounds_to_eight_bits() -> None:
    """Encoding quantizes to 1/255 steps."""
    image = np.random.default_rng(0).uniform(size=(3, 4, 5))
    decoded = decode_ppm(encode_ppm(image))
    assert decoded.shape == (3, 4, 5)
    assert np.abs(decoded - image).max() <= 0.5 / 255 + 1e-12


@pytest.mark.parametrize(
    ("data", "offset"),
    [
        (b"P3\n1 1\n255\n\x00\x00\x00", "byte 0"),
        (b"P6\n1 x\n255\n\x00\x00\x00", "byte 5"),
        (b"P6\n1 1\n65535\n\x00\x00\x00", "byte 7"),
        (b"P6\n2 1\n255\n\x00\x00\x00", "byte 14"),
        (b"P6\n1 1", "byte 6"),
    ],
)
def test_decode_ppm_errors_name_the_offset(data: bytes, offset: str) -> None:
    """Malformed files raise FormatError naming where they broke."""
    with pytest.raises(FormatError, match=offset):
        decode_ppm(data)


def test_encode_ppm_needs_three_channels() -> None:
    """Only (3, H, W) arrays are images."""
    with pytest.raises(InputError):
        encode_ppm(np.zeros((1, 2, 2)))


def test_ppm_files(tmp_path: Path) -> None:
    """Files written by write_ppm read back; missing files are storage errors."""
    image = np.zeros((3, 2, 2))
    image[1] = 1.0
    write_ppm(tmp_path / "a.ppm", image)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), image)
    with pytest.raises(StorageError):
        read_ppm(tmp_path / "missing.ppm")


def test_resize_to_square() -> None:
    """Any (3, H, W) image comes out (3, size, size) in [0, 1]."""
    image = np.random.default_rng(0).uniform(size=(3, 40, 70))
    out = resize(image, 64)
    assert out.shape == (3, 64, 64)
    assert 0.0 <= out.min() <= out.max() <= 1.0
    flat = resize(np.full((3, 32, 32), 0.25), 64)
    np.testing.assert_allclose(flat, 0.25)


def test_parse_voc_converts_coordinates() -> None:
    """1-based inclusive corners become 0-based half-open boxes."""
    annotation = parse_voc(_VOC, CLASSES)
    assert annotation.image_id == "000042"
    assert (annotation.width, annotation.height) == (100, 80)
    square, circle = annotation.objects
    assert square.class_id == 2
    assert square.difficult
    assert square.box.corners() == pytest.approx((10.0, 20.0, 30.0, 40.0))
    assert circle.class_id == 1
    assert not circle.difficult
    assert circle.box.corners() == pytest.approx((0.0, 0.0, 100.0, 80.0))


def test_parse_voc_unknown_class() -> None:
    """Object names outside the class list are input errors."""
    with pytest.raises(InputError, match="triangle"):
        parse_voc(_VOC.replace("square", "triangle"), CLASSES)


def test_parse_voc_malformed_xml_location() -> None:
    """Broken XML reports line and column."""
    with pytest.raises(FormatError, match=r"a.xml:2:\d+"):
        parse_voc("<annotation>\n<size></annotation>", CLASSES, source="a.xml")


def test_parse_voc_missing_fields() -> None:
    """A missing size or bndbox coordinate is a format error."""
    with pytest.raises(FormatError, match="size"):
        parse_voc("<annotation></annotation>", CLASSES)
    with pytest.raises(FormatError, match="xmax"):
        parse_voc(_VOC.replace("<xmax>30</xmax>", ""), CLASSES)


def test_voc_files_round_trip(tmp_path: Path) -> None:
    """write_voc output parses back to the same annotation."""
    annotation = Annotation(
        image_id="00007",
        width=64,
        height=64,
        objects=[
            GroundTruth(class_id=1, box=Box.from_corners(3.0, 4.0, 20.0, 31.0)),
            GroundTruth(
                class_id=2,
                box=Box.from_corners(30.0, 30.0, 60.0, 50.0),
                difficult=True,
            ),
        ],
    )
    path = tmp_path / "00007.xml"
    write_voc(path, annotation, CLASSES, filename="00007.ppm")
    assert read_voc(path, CLASSES) == annotation


def test_annotation_has_no_ground_truth_view() -> None:
    """Ground truths are built by evaluation, not by the annotation model."""
    assert "ground_truths" not in Annotation.model_fields
    assert not hasattr(Annotation, "ground_truths")
