"""Regenerate the prompt ensembles shipped in ``src/fade/data/prompts``.

``winclip``: the WinCLIP state x template product (7x22 normal, 4x22 anomalous).

``generated``: an object-agnostic ensemble of specific industrial defect and
normality descriptions.  It stands in for an LLM-written list and follows the
same instruction: describe a normal or anomalous industrial item without
naming the object.  486 anomalous and 423 normal prompts.

Run: python scripts/build_prompt_assets.py
"""

from itertools import product
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "fade" / "data" / "prompts"

WINCLIP_NORMAL_STATES = [
    "[o]",
    "flawless [o]",
    "perfect [o]",
    "unblemished [o]",
    "[o] without flaw",
    "[o] without defect",
    "[o] without damage",
]
WINCLIP_ANOMALOUS_STATES = [
    "damaged [o]",
    "[o] with flaw",
    "[o] with defect",
    "[o] with damage",
]
WINCLIP_TEMPLATES = [
    "a cropped photo of the {}",
    "a cropped photo of a {}",
    "a close-up photo of a {}",
    "a close-up photo of the {}",
    "a bright photo of a {}",
    "a bright photo of the {}",
    "a dark photo of the {}",
    "a dark photo of a {}",
    "a jpeg corrupted photo of a {}",
    "a jpeg corrupted photo of the {}",
    "a blurry photo of the {}",
    "a blurry photo of a {}",
    "a photo of a {}",
    "a photo of the {}",
    "a photo of a small {}",
    "a photo of the small {}",
    "a photo of a large {}",
    "a photo of the large {}",
    "a photo of the {} for visual inspection",
    "a photo of a {} for visual inspection",
    "a photo of the {} for anomaly detection",
    "a photo of a {} for anomaly detection",
]

DEFECTS = [
    "a scratch",
    "a crack",
    "a dent",
    "a hole",
    "a missing part",
    "contamination",
    "a stain",
    "discoloration",
    "a bent component",
    "a broken edge",
    "a cut",
    "a tear",
    "a fold",
    "a misalignment",
    "a deformation",
    "a chipped corner",
    "corrosion",
    "an air bubble",
    "a puncture",
    "a burn mark",
    "a foreign particle",
    "a squeezed region",
    "excess glue",
    "a faulty imprint",
    "a rough patch",
    "a misplaced component",
    "a swollen area",
]
DEFECT_TEMPLATES = [
    "a photo of an item with {}",
    "a close-up photo showing {}",
    "an inspection image revealing {}",
    "a product surface with {}",
    "a manufactured part with {}",
    "a defective item with {}",
    "a cropped image of an item with {}",
    "a macro shot of {} on a product",
    "a quality control photo showing {}",
    "an industrial photo with {}",
    "a damaged area containing {}",
    "a region of the item with {}",
    "a flawed component showing {}",
    "a detailed view of {}",
    "a photo of a faulty part with {}",
    "an image of an anomaly showing {}",
    "a picture of a product that has {}",
    "a surface with visible {}",
]

NORMAL_DESCRIPTIONS = [
    "a smooth surface",
    "a clean surface",
    "an intact edge",
    "a uniform texture",
    "a consistent color",
    "a perfectly aligned component",
    "no scratches",
    "no cracks",
    "no dents",
    "no holes",
    "no missing parts",
    "no contamination",
    "no stains",
    "no discoloration",
    "straight edges",
    "a regular pattern",
    "an even finish",
    "a complete structure",
    "correctly placed parts",
    "a symmetric shape",
    "a pristine appearance",
    "a spotless finish",
    "an undamaged body",
    "a well formed shape",
    "a solid structure",
    "a neat print",
    "a uniform coating",
    "a continuous surface",
    "a flat surface",
    "sharp clean corners",
    "a consistent thickness",
    "an unbroken seal",
    "properly attached components",
    "a standard shape",
    "a typical appearance",
    "a defect-free surface",
    "a homogeneous material",
    "an even color distribution",
    "a regular weave",
    "a proper assembly",
    "no foreign particles",
    "no deformation",
    "no burn marks",
    "no bubbles",
    "no tears",
    "no corrosion",
    "no misalignment",
]
NORMAL_TEMPLATES = [
    "a photo of an item with {}",
    "a close-up photo of {}",
    "an inspection image showing {}",
    "a flawless product with {}",
    "a quality control photo of {}",
    "an industrial photo showing {}",
    "a cropped image of {}",
    "a detailed view of {}",
    "a normal item with {}",
]


def _write(name, lines, header):
    path = OUT / name
    path.write_text("# " + header + "\n" + "\n".join(lines) + "\n", encoding="utf-8")
    print(f"{path.name}: {len(lines)}")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    normal = [t.format(s) for s, t in product(WINCLIP_NORMAL_STATES, WINCLIP_TEMPLATES)]
    anomalous = [t.format(s) for s, t in product(WINCLIP_ANOMALOUS_STATES, WINCLIP_TEMPLATES)]
    _write("winclip.normal.txt", normal, "WinCLIP normal states x templates; [o] = object name")
    _write("winclip.anomalous.txt", anomalous, "WinCLIP anomalous states x templates; [o] = object name")

    gen_anom = [t.format(d) for t, d in product(DEFECT_TEMPLATES, DEFECTS)]
    gen_norm = [t.format(d) for t, d in product(NORMAL_TEMPLATES, NORMAL_DESCRIPTIONS)]
    assert len(set(gen_anom)) == 486 and len(set(gen_norm)) == 423
    _write("generated.anomalous.txt", gen_anom, "object-agnostic anomalous prompts (scripts/build_prompt_assets.py)")
    _write("generated.normal.txt", gen_norm, "object-agnostic normal prompts (scripts/build_prompt_assets.py)")


if __name__ == "__main__":
    main()
