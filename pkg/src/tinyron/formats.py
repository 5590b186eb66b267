"""Binary PPM (P6) images and PASCAL VOC XML annotations.

Images are (3, H, W) float arrays in [0, 1], stored as 8-bit samples. VOC boxes
are 1-based inclusive on disk and 0-based half-open in memory.
"""

import logging
import xml.etree.ElementTree as ET
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from tinyron.domain.errors import FormatError, InputError, StorageError
from tinyron.domain.models import Annotation, Box, GroundTruth

logger = logging.getLogger(__name__)

PPM_MAGIC = b"P6"
MAX_SAMPLE = 255
_WHITESPACE = frozenset(b" \t\n\r\v\f")
_COMMENT = ord("#")


def encode_ppm(image: NDArray[np.floating]) -> bytes:
    """(3, H, W) image in [0, 1] -> P6 bytes, each sample rounded to 8 bits."""
    array = np.asarray(image)
    if array.ndim != 3 or array.shape[0] != 3:  # noqa: PLR2004
        msg = f"PPM images must be (3, H, W), got {array.shape}"
        raise InputError(msg)
    _, height, width = array.shape
    samples = np.rint(np.clip(array, 0.0, 1.0) * MAX_SAMPLE).astype(np.uint8)
    header = f"P6\n{width} {height}\n{MAX_SAMPLE}\n".encode("ascii")
    return header + samples.transpose(1, 2, 0).tobytes()


def _header_tokens(data: bytes, source: str) -> tuple[list[tuple[int, bytes]], int]:
    """Read magic, width, height, maxval; return them with their byte offsets."""
    tokens: list[tuple[int, bytes]] = []
    pos = 0
    while len(tokens) < 4:  # noqa: PLR2004
        while pos < len(data) and (data[pos] in _WHITESPACE or data[pos] == _COMMENT):
            if data[pos] == _COMMENT:
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos] != _COMMENT:
            pos += 1
        if start == pos:
            msg = f"{source}: truncated PPM header at byte {start}"
            raise FormatError(msg)
        tokens.append((start, data[start:pos]))
    return tokens, pos


def decode_ppm(data: bytes, *, source: str = "<bytes>") -> NDArray[np.float64]:
    """P6 bytes -> (3, H, W) float64 image in [0, 1].

    Raises FormatError naming the byte offset of the first malformed field.
    """
    tokens, pos = _header_tokens(data, source)
    (magic_at, magic), *numbers = tokens
    if magic != PPM_MAGIC:
        msg = f"{source}: expected magic P6 at byte {magic_at}, got {magic!r}"
        raise FormatError(msg)
    values = []
    labels = ("width", "height", "maxval")
    for (offset, token), label in zip(numbers, labels, strict=True):
        if not token.isdigit() or int(token) == 0:
            msg = f"{source}: invalid {label} {token!r} at byte {offset}"
            raise FormatError(msg)
        values.append(int(token))
    width, height, maxval = values
    if maxval > MAX_SAMPLE:
        msg = f"{source}: maxval {maxval} at byte {numbers[2][0]} exceeds 8 bits"
        raise FormatError(msg)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        msg = f"{source}: expected one whitespace byte after the header at byte {pos}"
        raise FormatError(msg)
    pos += 1
    expected = width * height * 3
    if len(data) - pos < expected:
        msg = (
            f"{source}: pixel data ends at byte {len(data)}, "
            f"expected {expected} bytes from byte {pos}"
        )
        raise FormatError(msg)
    samples = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos)
    return samples.reshape(height, width, 3).transpose(2, 0, 1) / float(maxval)


def resize(image: NDArray[np.floating], size: int) -> NDArray[np.float64]:
    """Bilinear rescale of a (3, H, W) image to (3, size, size)."""
    _, height, width = image.shape
    if height == size and width == size:
        return np.asarray(image, dtype=np.float64)
    zoomed = ndimage.zoom(image, (1.0, size / height, size / width), order=1)
    return np.clip(zoomed, 0.0, 1.0)


def write_ppm(path: Path, image: NDArray[np.floating]) -> None:
    """Write image to path as P6."""
    try:
        path.write_bytes(encode_ppm(image))
    except OSError as exc:
        msg = f"Failed to write image {path}"
        raise StorageError(msg) from exc


def read_ppm(path: Path) -> NDArray[np.float64]:
    """Read a P6 image from path."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        msg = f"Failed to read image {path}"
        raise StorageError(msg) from exc
    return decode_ppm(data, source=str(path))


def _text(element: ET.Element, tag: str, source: str) -> str:
    child = element.find(tag)
    if child is None or child.text is None or not child.text.strip():
        msg = f"{source}: <{element.tag}> is missing <{tag}>"
        raise FormatError(msg)
    return child.text.strip()


def _number(element: ET.Element, tag: str, source: str) -> float:
    raw = _text(element, tag, source)
    try:
        return float(raw)
    except ValueError as exc:
        msg = f"{source}: <{tag}> is not a number: {raw!r}"
        raise FormatError(msg) from exc


def parse_voc(
    text: str | bytes,
    class_names: Sequence[str],
    *,
    source: str = "<xml>",
) -> Annotation:
    """Parse one PASCAL VOC annotation; class names map to 1-based ids via class_names.

    Raises FormatError with line and column for malformed XML, and InputError
    for object names not in class_names.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, column = exc.position
        msg = f"{source}:{line}:{column}: malformed XML ({exc})"
        raise FormatError(msg) from exc

    size = root.find("size")
    if size is None:
        msg = f"{source}: <annotation> is missing <size>"
        raise FormatError(msg)
    filename = root.findtext("filename", default="").strip()
    image_id = Path(filename).stem if filename else Path(source).stem

    class_ids = {name: index for index, name in enumerate(class_names, 1)}
    objects = []
    for obj in root.iter("object"):
        name = _text(obj, "name", source)
        if name not in class_ids:
            msg = f"{source}: unknown class {name!r} (known: {', '.join(class_names)})"
            raise InputError(msg)
        bndbox = obj.find("bndbox")
        if bndbox is None:
            msg = f"{source}: <object> {name!r} is missing <bndbox>"
            raise FormatError(msg)
        xmin, ymin, xmax, ymax = (
            _number(bndbox, tag, source) for tag in ("xmin", "ymin", "xmax", "ymax")
        )
        if xmax < xmin or ymax < ymin:
            msg = f"{source}: empty bndbox for {name!r}: {xmin},{ymin},{xmax},{ymax}"
            raise InputError(msg)
        objects.append(
            GroundTruth(
                class_id=class_ids[name],
                box=Box.from_corners(xmin - 1, ymin - 1, xmax, ymax),
                difficult=obj.findtext("difficult", default="0").strip() == "1",
            ),
        )
    return Annotation(
        image_id=image_id,
        width=int(_number(size, "width", source)),
        height=int(_number(size, "height", source)),
        objects=objects,
    )


def _coordinate(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def format_voc(
    annotation: Annotation,
    class_names: Sequence[str],
    *,
    filename: str,
) -> str:
    """Render an annotation as VOC XML; inverse of parse_voc."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(annotation.width)
    ET.SubElement(size, "height").text = str(annotation.height)
    ET.SubElement(size, "depth").text = "3"
    for gt in annotation.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = class_names[gt.class_id - 1]
        ET.SubElement(obj, "difficult").text = "1" if gt.difficult else "0"
        bndbox = ET.SubElement(obj, "bndbox")
        left, top, right, bottom = gt.box.corners()
        corners = (
            ("xmin", left + 1),
            ("ymin", top + 1),
            ("xmax", right),
            ("ymax", bottom),
        )
        for tag, value in corners:
            ET.SubElement(bndbox, tag).text = _coordinate(value)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def read_voc(path: Path, class_names: Sequence[str]) -> Annotation:
    """Read and parse a VOC annotation file."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        msg = f"Failed to read annotation {path}"
        raise StorageError(msg) from exc
    return parse_voc(data, class_names, source=str(path))


def write_voc(
    path: Path,
    annotation: Annotation,
    class_names: Sequence[str],
    *,
    filename: str,
) -> None:
    """Write an annotation as VOC XML."""
    try:
        text = format_voc(annotation, class_names, filename=filename)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        msg = f"Failed to write annotation {path}"
        raise StorageError(msg) from exc
