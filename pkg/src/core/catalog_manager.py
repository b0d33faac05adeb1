"""Catalog manager for selecting a tile catalog backend with env fallback."""

import os
from collections.abc import Sequence

from .catalog import CatalogError, LocalDirectoryCatalog, SyntheticCatalog, TileCatalog
from .synth import SyntheticWorld

BACKENDS = ('synthetic', 'local')


class CatalogManager:
    """Manages TileCatalog instances.

    Features:
    - Explicit backend selection takes precedence
    - SECO_CATALOG / SECO_CATALOG_DIR environment variables as fallback
    - Lazy initialization of the default catalog
    """

    def __init__(
        self,
        world_seed: int = 0,
        patch_size: int = 64,
        ground_extent_km: float = 2.65,
        anchors: Sequence[tuple[float, float]] | None = None,
    ):
        """Initialize the catalog manager."""
        self.world_seed = world_seed
        self.patch_size = patch_size
        self.ground_extent_km = ground_extent_km
        self.anchors = anchors
        self._default_catalog: TileCatalog | None = None

    def _build(self, kind: str, catalog_dir: str | None) -> TileCatalog:
        if kind == 'synthetic':
            world = SyntheticWorld(
                seed=self.world_seed,
                patch_size=self.patch_size,
                ground_extent_km=self.ground_extent_km,
                anchors=self.anchors,
            )
            return SyntheticCatalog(world)
        if kind == 'local':
            if not catalog_dir or not catalog_dir.strip():
                raise ValueError(
                    "The local catalog needs a directory.\n"
                    "Solutions:\n"
                    "1. Set sampler.catalog_dir in the run config\n"
                    "2. Pass --catalog-dir on the command line\n"
                    "3. Set SECO_CATALOG_DIR in the environment or a .env file\n"
                )
            try:
                return LocalDirectoryCatalog(catalog_dir.strip())
            except CatalogError:
                raise
            except Exception as e:
                raise CatalogError(f"Failed to open local catalog {catalog_dir}: {str(e)}") from e
        raise ValueError(f"Unknown catalog backend '{kind}'; expected one of {', '.join(BACKENDS)}")

    def get_catalog(self, kind: str | None = None, catalog_dir: str | None = None) -> TileCatalog:
        """Get or create a TileCatalog.

        Args:
            kind: 'synthetic' or 'local'. If None, uses SECO_CATALOG (default synthetic).
            catalog_dir: directory of the local backend. If None, uses SECO_CATALOG_DIR.

        Returns:
            TileCatalog instance

        Raises:
            ValueError: unknown backend or missing directory for the local backend
            CatalogError: if the local catalog index cannot be read
        """
        if kind and kind.strip():
            return self._build(kind.strip(), catalog_dir or os.getenv("SECO_CATALOG_DIR"))

        if self._default_catalog is None:
            env_kind = os.getenv("SECO_CATALOG") or 'synthetic'
            self._default_catalog = self._build(
                env_kind.strip(), catalog_dir or os.getenv("SECO_CATALOG_DIR")
            )
        return self._default_catalog
