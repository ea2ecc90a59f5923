"""Regenerate the committed OpenAPI description from the live app."""

import json
import tempfile
from pathlib import Path

from flowcf.service import create_app

ROOT = Path(__file__).resolve().parent.parent

app = create_app(tempfile.mkdtemp())
doc = app.openapi()
out = ROOT / "openapi.json"
out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
print(f"wrote {out}")
