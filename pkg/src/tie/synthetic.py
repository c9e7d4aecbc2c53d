"""Synthetic grid VQA task.

Each scene is a K x K grid of flat-color cells, each stamped with one of
eight 7x7 glyph bitmaps. Questions ask for the glyph or the color at one
cell, so the answer is computable from that cell's pixels alone; zeroing
the cell destroys it. Rendering is pure integer rasterization.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .images import RawImage, read_image, write_image

GLYPH_NAMES = ["plus", "ring", "slash", "dots", "bars", "tee", "corner", "zig"]
COLOR_NAMES = ["red", "green", "blue", "yellow"]

_GLYPHS = {
    "plus": ["...#...", "...#...", "...#...", "#######", "...#...", "...#...", "...#..."],
    "ring": [".#####.", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#####."],
    "slash": ["......#", ".....#.", "....#..", "...#...", "..#....", ".#.....", "#......"],
    "dots": [".......", ".#...#.", ".......", "...#...", ".......", ".#...#.", "......."],
    "bars": ["#######", ".......", "#######", ".......", "#######", ".......", "#######"],
    "tee": ["#######", "...#...", "...#...", "...#...", "...#...", "...#...", "...#..."],
    "corner": ["#......", "#......", "#......", "#......", "#......", "#......", "#######"],
    "zig": ["#######", ".....#.", "....#..", "...#...", "..#....", ".#.....", "#######"],
}

_PALETTE = {
    "red": (217, 51, 51),
    "green": (51, 204, 64),
    "blue": (64, 89, 230),
    "yellow": (230, 217, 51),
}

_INK = (0, 0, 0)


@dataclass
class SceneSpec:
    grid_k: int
    glyphs: np.ndarray  # (K, K) glyph ids
    colors: np.ndarray  # (K, K) color ids
    tile_px: int


@dataclass
class QAPair:
    question: str
    answer_word: str
    kind: str  # "glyph" | "color"
    cell: tuple  # (row, col)


def glyph_bitmap(glyph_id):
    rows = _GLYPHS[GLYPH_NAMES[glyph_id]]
    return np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)


def render_scene(spec):
    """Rasterize a scene to uint8 RGB (tile_px, tile_px, 3)."""
    k, px = spec.grid_k, spec.tile_px
    if px % k:
        raise ValueError("tile_px must be divisible by grid_k")
    cs = px // k
    img = np.zeros((px, px, 3), dtype=np.uint8)
    # nearest-neighbor indices from cell pixels into the 7x7 bitmap
    nn = (np.arange(cs) * 7) // cs
    for r in range(k):
        for c in range(k):
            bmp = glyph_bitmap(int(spec.glyphs[r, c]))[np.ix_(nn, nn)]
            cell = np.empty((cs, cs, 3), dtype=np.uint8)
            cell[:] = _PALETTE[COLOR_NAMES[int(spec.colors[r, c])]]
            cell[bmp] = _INK
            img[r * cs:(r + 1) * cs, c * cs:(c + 1) * cs] = cell
    return img


def chance_accuracy(n_glyphs=8, n_colors=4, glyph_fraction=0.5):
    """Expected exact-match accuracy of uniform random guessing over the
    per-kind answer vocabularies."""
    return glyph_fraction / n_glyphs + (1.0 - glyph_fraction) / n_colors


class Dataset:
    """In-memory dataset: uint8 images plus question/answer annotations.
    Split is 90/10 train/val by index."""

    def __init__(self, images, questions, answer_words, kinds, cells, glyphs, colors,
                 grid_k, seed):
        self.images = images          # (n, px, px, 3) uint8
        self.questions = questions    # list[str]
        self.answer_words = answer_words
        self.kinds = kinds
        self.cells = cells            # (n, 2) int
        self.glyphs = glyphs          # (n, K, K) int8
        self.colors = colors          # (n, K, K) int8
        self.grid_k = grid_k
        self.seed = seed

    def __len__(self):
        return len(self.questions)

    @property
    def n_train(self):
        return (len(self) * 9) // 10

    def train_indices(self):
        return np.arange(self.n_train)

    def val_indices(self):
        return np.arange(self.n_train, len(self))

    def batch_images(self, idx):
        return self.images[idx].astype(T.dtype()) / 255.0

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        for i in range(len(self)):
            px = self.images[i].astype(np.float64) / 255.0
            write_image(os.path.join(img_dir, f"{i:05d}.ppm"),
                        RawImage(px.shape[0], px.shape[1], 3, px))
        k = self.grid_k
        tmp = os.path.join(out_dir, "index.tsv.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(f"# grid_k={k} seed={self.seed} n={len(self)}\n")
            f.write("idx\tsplit\tkind\trow\tcol\tanswer\tquestion\tglyphs\tcolors\n")
            for i in range(len(self)):
                split = "train" if i < self.n_train else "val"
                gl = ",".join(str(int(v)) for v in self.glyphs[i].reshape(-1))
                co = ",".join(str(int(v)) for v in self.colors[i].reshape(-1))
                f.write(f"{i}\t{split}\t{self.kinds[i]}\t{self.cells[i][0]}\t"
                        f"{self.cells[i][1]}\t{self.answer_words[i]}\t"
                        f"{self.questions[i]}\t{gl}\t{co}\n")
        os.replace(tmp, os.path.join(out_dir, "index.tsv"))

    @classmethod
    def load(cls, out_dir):
        path = os.path.join(out_dir, "index.tsv")
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
            meta = dict(kv.split("=") for kv in header.lstrip("# ").split())
            f.readline()  # column names
            rows = [line.rstrip("\n").split("\t") for line in f if line.strip()]
        k = int(meta["grid_k"])
        n = len(rows)
        images, questions, answers, kinds = [], [], [], []
        cells = np.zeros((n, 2), dtype=int)
        glyphs = np.zeros((n, k, k), dtype=np.int8)
        colors = np.zeros((n, k, k), dtype=np.int8)
        for row in rows:
            i = int(row[0])
            img = read_image(os.path.join(out_dir, "images", f"{i:05d}.ppm"))
            images.append(np.round(img.pixels * 255.0).astype(np.uint8))
            kinds.append(row[2])
            cells[i] = (int(row[3]), int(row[4]))
            answers.append(row[5])
            questions.append(row[6])
            glyphs[i] = np.array([int(v) for v in row[7].split(",")]).reshape(k, k)
            colors[i] = np.array([int(v) for v in row[8].split(",")]).reshape(k, k)
        return cls(np.stack(images), questions, answers, kinds, cells, glyphs, colors,
                   k, int(meta["seed"]))


def gen_dataset(n, grid_k=4, seed=0, tile_px=32, n_glyphs=8, n_colors=4):
    """Deterministic dataset: uniform glyph/color cells, uniform question
    kind and target cell per example."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = T.Rng(seed).stream("synthetic-vqa")
    glyphs = rng.integers(0, n_glyphs, size=(n, grid_k, grid_k)).astype(np.int8)
    colors = rng.integers(0, n_colors, size=(n, grid_k, grid_k)).astype(np.int8)
    kind_draw = rng.integers(0, 2, size=n)
    cell_draw = rng.integers(0, grid_k, size=(n, 2))
    images = np.zeros((n, tile_px, tile_px, 3), dtype=np.uint8)
    questions, answer_words, kinds = [], [], []
    for i in range(n):
        spec = SceneSpec(grid_k, glyphs[i], colors[i], tile_px)
        images[i] = render_scene(spec)
        r, c = int(cell_draw[i, 0]), int(cell_draw[i, 1])
        if kind_draw[i] == 0:
            kinds.append("glyph")
            questions.append(f"what glyph at row {r} col {c}?")
            answer_words.append(GLYPH_NAMES[int(glyphs[i, r, c])])
        else:
            kinds.append("color")
            questions.append(f"what color at row {r} col {c}?")
            answer_words.append(COLOR_NAMES[int(colors[i, r, c])])
    return Dataset(images, questions, answer_words, kinds, cell_draw.astype(int),
                   glyphs, colors, grid_k, seed)
