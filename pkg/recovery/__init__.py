"""Error taxonomy, error recording, run manifests and logging setup"""
