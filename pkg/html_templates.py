"""
Template HTML per il report dello studio di ablazione
Pagina unica con tabelle di regret, AVF e statistiche dei pesi.
"""

import html

import numpy as np

APP_NAME = "Fault-aware ResNet Guard"


def get_shared_css():
    """CSS condiviso, salvato come styles.css accanto a index.html"""
    return """
        * {
            margin: 0;
            padding: 0;
            box-sizing: border-box;
        }

        body {
            font-family: 'Segoe UI', Tahoma, Geneva, Verdana, sans-serif;
            line-height: 1.6;
            background: linear-gradient(135deg, #f5f7fa 0%, #c3cfe2 100%);
            min-height: 100vh;
            padding: 20px;
        }

        .container {
            max-width: 1400px;
            margin: 0 auto;
            background-color: white;
            border-radius: 15px;
            box-shadow: 0 10px 30px rgba(0,0,0,0.2);
            overflow: hidden;
        }

        /* Header */
        header {
            background: linear-gradient(135deg, #1e3a5f 0%, #2d6a9f 100%);
            color: white;
            padding: 30px 40px;
        }

        header h1 {
            font-size: 2.2em;
            margin-bottom: 10px;
        }

        header .subtitle {
            font-size: 1.1em;
            opacity: 0.9;
        }

        main {
            padding: 40px;
        }

        .card {
            background-color: #fff;
            border: 1px solid #e0e0e0;
            border-radius: 10px;
            padding: 25px;
            margin-bottom: 25px;
            box-shadow: 0 2px 8px rgba(0,0,0,0.08);
        }

        h2 {
            color: #2d6a9f;
            margin-bottom: 15px;
            font-size: 1.6em;
            border-left: 5px solid #4fa3e0;
            padding-left: 15px;
        }

        .info-box {
            background: linear-gradient(135deg, #f0f8ff 0%, #e6f3ff 100%);
            border-left: 5px solid #4fa3e0;
            padding: 20px;
            margin: 20px 0;
            border-radius: 8px;
        }

        /* Tables */
        table {
            width: 100%;
            border-collapse: collapse;
            margin: 20px 0;
            background-color: white;
            box-shadow: 0 2px 8px rgba(0,0,0,0.08);
            border-radius: 8px;
            overflow: hidden;
        }

        th {
            background: linear-gradient(135deg, #1e3a5f 0%, #2d6a9f 100%);
            color: white;
            padding: 12px;
            text-align: left;
            font-weight: 600;
        }

        td {
            padding: 10px 12px;
            border-bottom: 1px solid #e0e0e0;
            font-variant-numeric: tabular-nums;
        }

        tr:hover {
            background-color: #f5f5f5;
        }

        tr:last-child td {
            border-bottom: none;
        }

        .badge {
            display: inline-block;
            padding: 4px 10px;
            border-radius: 20px;
            font-size: 0.85em;
            font-weight: 600;
        }

        .badge-success {
            background-color: #2e9d5b;
            color: white;
        }

        .badge-warning {
            background-color: #f59e0b;
            color: white;
        }

        footer {
            background-color: #1e3a5f;
            color: white;
            text-align: center;
            padding: 25px;
            margin-top: 40px;
        }

        @media (max-width: 768px) {
            main {
                padding: 20px;
            }

            header h1 {
                font-size: 1.6em;
            }
        }
    """


def format_cell(value):
    """Float con quattro decimali, il resto come testo con escape"""
    if isinstance(value, (float, np.floating)):
        return f"{value:.4f}"
    return html.escape(str(value))


def create_table(frame, highlight_column=None):
    """
    Tabella HTML da un DataFrame

    Args:
        frame: pandas.DataFrame
        highlight_column: Colonna numerica: badge verde sul minimo, arancione sul massimo

    Returns:
        str: HTML della tabella
    """
    best = worst = None
    if highlight_column is not None and highlight_column in frame and len(frame):
        best = frame[highlight_column].min()
        worst = frame[highlight_column].max()

    header = ''.join(f'<th>{html.escape(str(col))}</th>' for col in frame.columns)
    rows = []
    for _, row in frame.iterrows():
        cells = []
        for col in frame.columns:
            text = format_cell(row[col])
            if col == highlight_column and best is not None and row[col] == best:
                text = f'<span class="badge badge-success">{text}</span>'
            elif col == highlight_column and worst is not None and row[col] == worst:
                text = f'<span class="badge badge-warning">{text}</span>'
            cells.append(f'<td>{text}</td>')
        rows.append(f"<tr>{''.join(cells)}</tr>")
    return f"<table><tr>{header}</tr>{''.join(rows)}</table>"


def create_section(title, body, note=''):
    note_html = f'<div class="info-box">{html.escape(note)}</div>' if note else ''
    return f"""
    <div class="card">
        <h2>{html.escape(title)}</h2>
        {note_html}
        {body}
    </div>
    """


def create_header(title, subtitle=''):
    """Crea l'header della pagina"""
    subtitle_html = f'<p class="subtitle">{html.escape(subtitle)}</p>' if subtitle else ''

    return f"""
    <header>
        <h1>{html.escape(title)}</h1>
        {subtitle_html}
    </header>
    """


def create_footer():
    """Crea il footer della pagina (senza data di generazione)"""
    return f"""
    <footer>
        <p><strong>{APP_NAME}</strong> - report dello studio di ablazione</p>
    </footer>
    """


def create_html_page(title, content, subtitle='', css_path='styles.css'):
    """
    Crea una pagina HTML completa

    Args:
        title: Titolo della pagina
        content: Contenuto HTML della pagina
        subtitle: Sottotitolo opzionale
        css_path: Path al file CSS

    Returns:
        str: HTML completo della pagina
    """
    return f"""<!DOCTYPE html>
<html lang="it">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{html.escape(title)} - {APP_NAME}</title>
    <link rel="stylesheet" href="{css_path}">
</head>
<body>
    <div class="container">
        {create_header(title, subtitle)}
        <main>
            {content}
        </main>
        {create_footer()}
    </div>
</body>
</html>"""
