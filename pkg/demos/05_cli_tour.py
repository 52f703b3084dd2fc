"""The command-line front end, driven from Python.

Equivalent shell commands:
    tinyattn verify --model ecg
    tinyattn plan --model eeg --mode lwt
    tinyattn fuse --model tr
    tinyattn bench

Run: python3 demos/05_cli_tour.py
"""
from tinyattn.cli import main

for argv in (["plan", "--model", "eeg", "--mode", "lwt"],
             ["fuse", "--model", "tr"],
             ["bench", "--model", "ecg", "--model", "tr"]):
    print("$ tinyattn", " ".join(argv))
    code = main(argv)
    print(f"(exit {code})\n")
