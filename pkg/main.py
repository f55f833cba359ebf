"""
Background-preserving voice conversion - command-line entry point.

A source-separation front end splits a recording into speech and
background sound, a voice conversion module re-synthesizes the speech in a
target speaker's voice, and the separated background can be superimposed
back onto the converted voice.

Usage:
    python main.py toy-corpus --out data/toy
    python main.py mix --speech-manifest data/toy/speech.jsonl \\
        --background-manifest data/toy/background.jsonl --out data/mix --n 32
    python main.py --config configs/toy.yaml train --data data/mix/mixtures.jsonl --run-dir runs/toy
    python main.py convert --checkpoint runs/toy/checkpoints/latest.pt \\
        --input in.wav --out-dir out --target-speaker spk_high
    python main.py eval --data data/mix/mixtures.jsonl --out-dir reports \\
        --checkpoint full=runs/toy/checkpoints/latest.pt
    python main.py inspect --checkpoint runs/toy/checkpoints/latest.pt

Requirements:
    - Python 3.8+
    - torch, numpy, scipy, librosa, soundfile, matplotlib, openpyxl, PyYAML, tqdm

See requirements.txt for exact version requirements.
"""

import os
import sys

# Add the project root to the Python path
project_root = os.path.dirname(os.path.abspath(__file__))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from cli.commands import run


def main():
    """Run the command given on the command line and exit with its code."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
