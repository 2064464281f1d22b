def wrap(
    text,
    width=80,
):
    """Greedy word wrap of text to the given width."""
    words, lines, current = text.split(), [], ""
    for w in words:
        if len(current) + len(w) + 1 > width and current:
            lines.append(current)
            current = w
        else:
            current = f"{current} {w}".strip()
    if current:
        lines.append(current)
    return lines


def title_case(s):  # trailing comment on the signature
    """
    Capitalise the first letter of every word.
    """
    return " ".join(w[:1].upper() + w[1:] for w in s.split())
