#!/usr/bin/env python3
"""Rasterize DejaVu Sans Mono into the fixed bitmap font compiled into the renderer.

Run once; the generated src/font_data.inc is checked in so builds never touch
system fonts.
"""
import sys
from pathlib import Path

import matplotlib
from PIL import Image, ImageDraw, ImageFont

SIZES = {"small": (11, "DejaVuSansMono.ttf"), "large": (16, "DejaVuSansMono-Bold.ttf")}
FIRST, LAST = 32, 126


def rasterize(px, fname):
    path = Path(matplotlib.get_data_path()) / "fonts" / "ttf" / fname
    font = ImageFont.truetype(str(path), px)
    ascent, descent = font.getmetrics()
    width = max(int(round(font.getlength(chr(c)))) for c in range(FIRST, LAST + 1))
    height = ascent + descent
    glyphs = []
    for c in range(FIRST, LAST + 1):
        img = Image.new("L", (width, height), 0)
        ImageDraw.Draw(img).text((0, 0), chr(c), fill=255, font=font)
        glyphs.append(img.tobytes())
    return width, height, glyphs


def main(out):
    lines = ["// Generated by tools/gen_font.py from DejaVu Sans Mono. Do not edit.", ""]
    for name, (px, fname) in SIZES.items():
        w, h, glyphs = rasterize(px, fname)
        lines.append(f"constexpr int k_{name}_width = {w};")
        lines.append(f"constexpr int k_{name}_height = {h};")
        lines.append(f"constexpr unsigned char k_{name}_alpha[] = {{")
        for g in glyphs:
            for i in range(0, len(g), 24):
                lines.append("    " + ",".join(str(b) for b in g[i:i + 24]) + ",")
        lines.append("};")
        lines.append("")
    Path(out).write_text("\n".join(lines))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/font_data.inc")
