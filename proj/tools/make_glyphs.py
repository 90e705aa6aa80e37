#!/usr/bin/env python3
"""Render a notMNIST-style letter glyph dataset from locally installed fonts.

Writes <out>/<LETTER>/<letter>_<index>.png, 28x28 grayscale, white glyph on
black, one directory per letter. Each sample picks a font (round robin over
the sorted font list) and applies seeded jitter to size, position, rotation
and stroke weight, so the output is identical for identical arguments.
"""

import argparse
import glob
import os
import random
import sys

from PIL import Image, ImageDraw, ImageFont, ImageFilter

SKIP = ("Sym", "NonUni", "cmex", "cmsy", "Display")


def default_font_dirs():
    dirs = ["/usr/share/fonts"]
    try:
        import matplotlib

        dirs.append(os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf"))
    except ImportError:
        pass
    return dirs


def find_fonts(dirs, letters):
    by_name = {}
    for d in dirs:
        for path in glob.glob(os.path.join(d, "**", "*.ttf"), recursive=True):
            name = os.path.basename(path)
            if any(s in name for s in SKIP) or name in by_name:
                continue
            try:
                font = ImageFont.truetype(path, 20)
            except OSError:
                continue
            if all(font.getbbox(ch)[2] > font.getbbox(ch)[0] for ch in letters):
                by_name[name] = path
    return [by_name[n] for n in sorted(by_name)]


def render(letter, font_path, rng, side):
    canvas = side * 4
    size = int(canvas * rng.uniform(0.55, 0.8))
    font = ImageFont.truetype(font_path, size)
    img = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(img)
    left, top, right, bottom = draw.textbbox((0, 0), letter, font=font)
    x = (canvas - (right - left)) / 2 - left + rng.uniform(-0.06, 0.06) * canvas
    y = (canvas - (bottom - top)) / 2 - top + rng.uniform(-0.06, 0.06) * canvas
    stroke = rng.choice([0, 0, 1, 2])
    draw.text((x, y), letter, fill=255, font=font, stroke_width=stroke, stroke_fill=255)
    img = img.rotate(rng.uniform(-12.0, 12.0), resample=Image.BILINEAR)
    if rng.random() < 0.3:
        img = img.filter(ImageFilter.GaussianBlur(rng.uniform(0.5, 1.5)))
    return img.resize((side, side), Image.LANCZOS)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", help="output dataset root")
    parser.add_argument("--letters", default="AH")
    parser.add_argument("--per-class", type=int, default=145)
    parser.add_argument("--side", type=int, default=28)
    parser.add_argument("--seed", type=int, default=2018)
    parser.add_argument("--font-dir", action="append", dest="font_dirs")
    args = parser.parse_args(argv)

    fonts = find_fonts(args.font_dirs or default_font_dirs(), args.letters)
    if not fonts:
        print("make_glyphs: no usable fonts found", file=sys.stderr)
        return 1
    rng = random.Random(args.seed)
    for letter in args.letters:
        target = os.path.join(args.out, letter)
        os.makedirs(target, exist_ok=True)
        for i in range(args.per_class):
            img = render(letter, fonts[i % len(fonts)], rng, args.side)
            img.save(os.path.join(target, f"{letter.lower()}_{i:04d}.png"))
    print(f"make_glyphs: {len(fonts)} fonts, {args.per_class} images per letter -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
