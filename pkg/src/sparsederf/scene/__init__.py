# Marks scene as a package: manifest models, repository, presets and the synthetic generator.
