"""Desk-scale BEV road-scene toolkit.

Submodules:

- ``tensor``     matrices, tape autodiff, seeded RNG, gradient checking
- ``optim``      AdamW and warmup + cosine LR schedule
- ``checkpoint`` single-file container for named matrices
- ``scenes``     road-scene records and corpus loading
- ``raster``     top-down rasterization of scenes to images
- ``captions``   template captions and QA pair synthesis
- ``vocab``      word-level tokenizer
- ``model``      patch embed, encoder, projection, low-rank adapted decoder
- ``training``   two-stage instruction tuning loop
- ``qa_eval``    answer scoring, frame/question metrics, visibility report
- ``det_eval``   IoU/GIoU, assignment, PR/F1, mAP@0.5
- ``lanefit``    image preprocessing and polynomial lane fitting
- ``pipeline``   config-driven end-to-end runs
- ``cli``        command-line entry points
"""

__version__ = "0.1.0"
