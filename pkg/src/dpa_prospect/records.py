"""Feed record types shared by the training, serving and generator code."""

from __future__ import annotations

from dataclasses import dataclass, field

from .catalog import ProductKey

GENDERS = ("female", "male", "unknown")
PIXEL_KINDS = ("purchase", "add_to_cart", "view")
POSITIVE_PIXEL_KINDS = frozenset({"purchase", "add_to_cart"})


@dataclass
class UserProfile:
    user_id: str
    age: int  # years, 0 when unknown
    gender: str
    features: dict[str, list[str]] = field(default_factory=dict)

    @property
    def known_demographics(self) -> bool:
        return self.age > 0 and self.gender in ("female", "male")


@dataclass
class Impression:
    timestamp: int
    user_id: str
    age: int
    gender: str
    product: ProductKey
    dpa_type: str
    page_section: str
    device: str  # "mobile" or "nonMobile"
    slot: int
    frequency: int  # prior views of the campaign during the past week
    recency: int  # seconds since the product was last seen on the advertiser site, -1 if never
    clicked: int = 0
    language: str = "en"


@dataclass
class Conversion:
    timestamp: int
    user_id: str
    product: ProductKey
    click_timestamp: int


@dataclass
class PixelEvent:
    timestamp: int
    user_id: str
    age: int
    gender: str
    product: ProductKey
    kind: str

    @property
    def positive(self) -> bool:
        return self.kind in POSITIVE_PIXEL_KINDS


@dataclass
class Campaign:
    """Product-group level campaign terms."""

    advertiser_id: str
    product_group_id: str
    bid: int  # bid_product-group, cents per click
    budget: int  # remaining budget, cents
    expiration_day: int
    target_genders: tuple[str, ...] = ("female", "male", "unknown")
    languages: tuple[str, ...] = ("en",)
