"""Patient records, dataset files, preprocessing and synthetic cohorts."""
