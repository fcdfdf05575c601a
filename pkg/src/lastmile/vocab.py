"""OSM sub-tag vocabularies and the nine-way super-tag rollup."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError

SUPER_TAGS = (
    "Built Environment",
    "Transportation",
    "Natural Elements",
    "Amenities",
    "Leisure & Recreation",
    "Barriers & Boundaries",
    "Utilities & Services",
    "Commerce & Industry",
    "Historical & Cultural",
)

# First match wins, so the narrow amenity/landuse/tourism patterns sit
# above the catch-all key patterns.
DEFAULT_SUPER_MAP: tuple[tuple[str, str], ...] = (
    (r"^historic=", "Historical & Cultural"),
    (r"^tourism=(museum|artwork|gallery|attraction)$", "Historical & Cultural"),
    (r"^amenity=(arts_centre|theatre|place_of_worship|library|monastery|grave_yard|crematorium)$",
     "Historical & Cultural"),
    (r"^building=(cathedral|chapel|church|monastery|mosque|religious|shrine|synagogue|temple|castle|ruins)$",
     "Historical & Cultural"),
    (r"^landuse=(cemetery|religious)$", "Historical & Cultural"),
    (r"^amenity=(parking\w*|bicycle_\w+|motorcycle_parking|fuel|charging_station|bus_station|taxi|"
     r"car_\w+|ferry_terminal|boat_\w+|loading_dock|ticket_validator|compressed_air)$", "Transportation"),
    (r"^building=(train_station|transportation|garage|garages|parking|carport|hangar|bridge)$",
     "Transportation"),
    (r"^landuse=(railway|port)$", "Transportation"),
    (r"^(highway|railway|public_transport|aeroway)=", "Transportation"),
    (r"^landuse=(forest|meadow|grass|orchard|vineyard|farmland|allotments|flowerbed|greenfield|basin|"
     r"salt_pond|aquaculture|paddy|plant_nursery|greenhouse_horticulture|animal_keeping|farmyard)$",
     "Natural Elements"),
    (r"^(natural|waterway|water|wetland)=", "Natural Elements"),
    (r"^amenity=(hospital|clinic|doctors|dentist|pharmacy|police|fire_station|post_office|post_box|"
     r"post_depot|parcel_locker|townhall|courthouse|prison|ranger_station|recycling|waste_\w+|toilets|"
     r"drinking_water|water_point|social_facility|nursing_home|childcare|veterinary|telephone|"
     r"sanitary_dump_station|letter_box|shower|mortuary|grit_bin)$", "Utilities & Services"),
    (r"^(power|man_made|emergency|healthcare)=", "Utilities & Services"),
    (r"^building=(hospital|fire_station|government|civic|public|service|transformer_tower|water_tower|"
     r"storage_tank|digester|toilets)$", "Utilities & Services"),
    (r"^amenity=(marketplace|bank|atm|bureau_de_change|money_transfer|payment_terminal|vending_machine|"
     r"coworking_space|conference_centre|events_venue)$", "Commerce & Industry"),
    (r"^(shop|office|craft|industrial)=", "Commerce & Industry"),
    (r"^landuse=(commercial|retail|industrial|depot|quarry|landfill|brownfield|garages|construction)$",
     "Commerce & Industry"),
    (r"^building=(commercial|industrial|kiosk|office|retail|supermarket|warehouse)$", "Commerce & Industry"),
    (r"^(leisure|sport)=", "Leisure & Recreation"),
    (r"^tourism=", "Leisure & Recreation"),
    (r"^landuse=(recreation_ground|village_green|winter_sports|fairground)$", "Leisure & Recreation"),
    (r"^building=(grandstand|pavilion|riding_hall|sports_hall|stadium)$", "Leisure & Recreation"),
    (r"^amenity=(cinema|nightclub|casino|gambling|bar|pub|biergarten|stripclub|swingerclub|love_hotel|"
     r"brothel|dojo|bbq|fountain|dive_centre)$", "Leisure & Recreation"),
    (r"^(barrier|boundary)=", "Barriers & Boundaries"),
    (r"^landuse=military$", "Barriers & Boundaries"),
    (r"^amenity=", "Amenities"),
    (r"^(building|landuse|place)=", "Built Environment"),
)


@dataclass(frozen=True)
class TagVocabulary:
    subtags: tuple[str, ...]
    super_map: tuple[tuple[str, str], ...] = DEFAULT_SUPER_MAP
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.subtags)) != len(self.subtags):
            dup = sorted({t for t in self.subtags if self.subtags.count(t) > 1})
            raise ConfigError(f"duplicate subtags: {dup[:5]}")
        names = {name for _, name in self.super_map}
        unknown = names - set(SUPER_TAGS)
        if unknown:
            raise ConfigError(f"unknown super-tag names: {sorted(unknown)}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.subtags)})

    def __len__(self):
        return len(self.subtags)

    def index(self, tag: str) -> int | None:
        return self._index.get(tag)

    def super_tag(self, tag: str) -> str | None:
        for pattern, name in self.super_map:
            if re.search(pattern, tag):
                return name
        return None

    def super_columns(self) -> list[int | None]:
        """Super-tag column (index into ``SUPER_TAGS``) for every subtag."""
        order = {name: j for j, name in enumerate(SUPER_TAGS)}
        cols = []
        for tag in self.subtags:
            name = self.super_tag(tag)
            cols.append(None if name is None else order[name])
        return cols

    def subset(self, tags) -> TagVocabulary:
        return TagVocabulary(tuple(tags), self.super_map)


def parse_vocab_text(text: str) -> list[str]:
    tags = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            if "=" not in line:
                raise ConfigError(f"vocabulary entry without '=': {line!r}")
            tags.append(line)
    return tags


def load_vocab(path: str | Path) -> TagVocabulary:
    return TagVocabulary(tuple(parse_vocab_text(Path(path).read_text(encoding="utf-8"))))


def default_vocab(size: int = 754) -> TagVocabulary:
    """Bundled vocabulary: 754 tags (raw-count features) or 681 (embedding input)."""
    if size not in (681, 754):
        raise ConfigError(f"bundled vocabularies have 681 or 754 tags, not {size}")
    text = resources.files("lastmile.data").joinpath(f"tags_{size}.txt").read_text(encoding="utf-8")
    return TagVocabulary(tuple(parse_vocab_text(text)))


def write_vocab(vocab: TagVocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.subtags) + "\n", encoding="utf-8")
