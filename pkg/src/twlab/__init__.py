"""Tournament watermark simulation lab: sampling, scores, detection theory."""
