"""Обработчики команд CLI: async (RunConfig, ArtifactWriter) -> сводка запуска."""
