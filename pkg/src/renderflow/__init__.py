"""Single-step bridge-matching neural rendering from G-buffers."""
