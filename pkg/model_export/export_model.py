#!/usr/bin/env python3
"""Runnable wrapper: python3 export_model.py --model resnet50 --opset 13 ..."""

from model_export.cli import main

if __name__ == "__main__":
    main()
