# Domain services: ingestion, preprocessing, networks and training.
