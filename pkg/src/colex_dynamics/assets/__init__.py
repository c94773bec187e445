"""Reference lists packaged with the ingest pipeline."""
