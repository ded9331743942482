"""Product hierarchy, per-product statistics and catalog entries."""

from __future__ import annotations

from dataclasses import dataclass

SEP = "/"


@dataclass(frozen=True, order=True)
class ProductKey:
    """advertiser -> product-set -> product-group -> product."""

    advertiser_id: str
    product_set_id: str
    product_group_id: str
    product_id: str

    def __post_init__(self):
        for part in (self.advertiser_id, self.product_set_id, self.product_group_id, self.product_id):
            if not part or SEP in part:
                raise ValueError(f"invalid product path component {part!r}")

    @property
    def path(self) -> str:
        return SEP.join((self.advertiser_id, self.product_set_id, self.product_group_id,
                         self.product_id))

    @classmethod
    def from_path(cls, path: str) -> "ProductKey":
        parts = path.split(SEP)
        if len(parts) != 4:
            raise ValueError(f"product path needs four levels: {path!r}")
        return cls(*parts)


@dataclass
class ProductStats:
    impressions: int = 0
    clicks: int = 0
    conversions: int = 0
    spend: int = 0  # US cents
    last_seen_day: int = -1

    def __post_init__(self):
        if min(self.impressions, self.clicks, self.conversions, self.spend) < 0:
            raise ValueError("product statistics must be non-negative")
        if self.clicks > self.impressions:
            raise ValueError("clicks cannot exceed impressions")


@dataclass
class CatalogEntry:
    key: ProductKey
    stats: ProductStats
    title: str = ""
    image: str = ""
    description: str = ""
    category: str = ""

    @property
    def has_assets(self) -> bool:
        return bool(self.title and self.image and self.description)


class Catalog:
    """Products indexed by product id."""

    def __init__(self, entries=()):
        self._by_id: dict[str, CatalogEntry] = {}
        for entry in entries:
            self.add(entry)

    def add(self, entry: CatalogEntry):
        existing = self._by_id.get(entry.key.product_id)
        if existing is not None and existing.key != entry.key:
            raise ValueError(f"product {entry.key.product_id} maps to two paths")
        self._by_id[entry.key.product_id] = entry

    def __len__(self):
        return len(self._by_id)

    def __iter__(self):
        return iter(self._by_id.values())

    def __contains__(self, product_id) -> bool:
        return product_id in self._by_id

    def get(self, product_id: str) -> CatalogEntry | None:
        return self._by_id.get(product_id)

    def key(self, product_id: str) -> ProductKey:
        return self._by_id[product_id].key

    def stats(self) -> dict[ProductKey, ProductStats]:
        return {e.key: e.stats for e in self._by_id.values()}

    def by_advertiser(self, advertiser_id: str) -> list[CatalogEntry]:
        return [e for e in self._by_id.values() if e.key.advertiser_id == advertiser_id]
