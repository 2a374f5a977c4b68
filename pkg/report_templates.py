#!/usr/bin/env python3
"""
Report Templates - Informe Markdown/HTML de una corrida
======================================================
El informe se compone en Markdown (legible en el bundle) y se convierte a
HTML autocontenido con la librería markdown, sin JavaScript ni CDN.

Versión: 1.0.0
"""

import html
import json
from typing import Dict, Optional, Sequence

# Importación opcional
try:
    from markdown import markdown
    MARKDOWN_SUPPORT = True
except ImportError:
    MARKDOWN_SUPPORT = False

_THEMES: Dict[str, Dict[str, str]] = {
    "dark": {
        "bg_color": "#1a1a2e",
        "text_color": "#eaeaea",
        "card_bg": "#16213e",
        "accent_color": "#0f3460",
        "border_color": "#0f3460",
        "table_header_bg": "#0f3460",
        "code_bg": "#0d1117",
    },
    "light": {
        "bg_color": "#f8fafc",
        "text_color": "#1e293b",
        "card_bg": "#ffffff",
        "accent_color": "#3b82f6",
        "border_color": "#e2e8f0",
        "table_header_bg": "#f1f5f9",
        "code_bg": "#f1f5f9",
    },
}

REPORT_THEMES = tuple(_THEMES)


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(str(h) for h in header) + " |",
             "|" + "|".join(" --- " for _ in header) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines)


def render_report_markdown(summary: dict, results_text: str = "", comparison_text: str = "",
                           ablation_text: str = "") -> str:
    """Informe Markdown a partir de summary.json y las tablas de texto."""
    sections = [f"# Informe de corrida: {summary.get('name', '-')}", ""]
    sections.append(_markdown_table(
        ["campo", "valor"],
        [
            ["estado", summary.get("status", "-")],
            ["semilla", summary.get("seed", "-")],
            ["etapas", ", ".join(summary.get("stages_completed", [])) or "-"],
        ],
    ))

    backends = summary.get("backends") or {}
    if backends:
        sections += ["", "## Backends", "",
                     _markdown_table(["backend", "valor"], [[k, v if v is not None else "-"]
                                                            for k, v in sorted(backends.items())])]

    stats = summary.get("stats") or {}
    if stats:
        names = sorted(stats)
        fields = sorted({field for table in stats.values() for field in table})
        sections += ["", "## Estadísticas de datasets", "",
                     _markdown_table(["campo"] + names, [[f] + [stats[n].get(f, 0) for n in names]
                                                         for f in fields])]

    shortfall = summary.get("shortfall")
    if shortfall:
        sections += ["", "## Déficit de síntesis", "", "```", json.dumps(shortfall, indent=2), "```"]

    for title, block in (("Resultados", results_text), ("Comparación", comparison_text),
                         ("Ablación", ablation_text)):
        if block:
            sections += ["", f"## {title}", "", "```", block.rstrip("\n"), "```"]

    failure = summary.get("failure")
    if failure:
        sections += ["", "## Fallo", "",
                     f"Etapa `{failure.get('stage')}`, elemento `{failure.get('item_id') or '-'}`: "
                     f"{failure.get('cause')}"]
    return "\n".join(sections) + "\n"


def render_report_html(body_markdown: str, title: str, theme: str = "light",
                       subtitle: Optional[str] = None) -> str:
    """HTML completo con el estilo del tema; sin markdown disponible se muestra en <pre>."""
    colors = _THEMES.get(theme, _THEMES["light"])
    if MARKDOWN_SUPPORT:
        body_html = markdown(body_markdown, extensions=["tables", "fenced_code"])
    else:
        body_html = f"<pre>{html.escape(body_markdown)}</pre>"
    meta = f'<div class="header-meta">{html.escape(subtitle)}</div>' if subtitle else ""

    return f'''<!DOCTYPE html>
<html lang="es">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{html.escape(title)}</title>
    <style>
        body {{
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif;
            background-color: {colors["bg_color"]};
            color: {colors["text_color"]};
            line-height: 1.6;
            margin: 0;
        }}
        .header {{
            background: linear-gradient(135deg, #667eea 0%, #764ba2 100%);
            color: white;
            padding: 2rem;
            text-align: center;
        }}
        .header-meta {{ font-size: 0.9rem; opacity: 0.9; }}
        .container {{ max-width: 960px; margin: 0 auto; padding: 2rem; }}
        .content {{
            background: {colors["card_bg"]};
            border: 1px solid {colors["border_color"]};
            border-radius: 12px;
            padding: 2rem;
        }}
        h2 {{ border-bottom: 2px solid {colors["accent_color"]}; padding-bottom: 0.3rem; }}
        table {{ border-collapse: collapse; margin: 1rem 0; }}
        th, td {{ border: 1px solid {colors["border_color"]}; padding: 0.4rem 0.8rem; }}
        th {{ background: {colors["table_header_bg"]}; }}
        pre, code {{
            background: {colors["code_bg"]};
            font-family: 'JetBrains Mono', monospace;
            font-size: 0.85rem;
        }}
        pre {{ padding: 1rem; overflow-x: auto; border-radius: 8px; }}
    </style>
</head>
<body>
    <div class="header">
        <h1>{html.escape(title)}</h1>
        {meta}
    </div>
    <div class="container">
        <div class="content">
{body_html}
        </div>
    </div>
</body>
</html>
'''
