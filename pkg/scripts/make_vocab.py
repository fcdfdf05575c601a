"""Regenerate the shipped OSM sub-tag vocabularies.

Writes ``src/lastmile/data/tags_754.txt`` (full list, used for raw-count
features) and ``tags_681.txt`` (the embedding list, which drops the
``natural``/``water*``/``wetland`` families because they vary too much
between cities).

    python scripts/make_vocab.py
"""
from pathlib import Path

CORE = {
    "amenity": """
        arts_centre atm bank bar bbq bench bicycle_parking bicycle_rental bicycle_repair_station
        biergarten boat_rental bureau_de_change bus_station cafe car_rental car_sharing car_wash
        casino charging_station childcare cinema clinic clock college community_centre compressed_air
        conference_centre courthouse coworking_space crematorium dentist doctors dojo drinking_water
        driving_school embassy events_venue fast_food ferry_terminal fire_station food_court fountain
        fuel gambling grave_yard grit_bin hospital hunting_stand ice_cream internet_cafe kindergarten
        kiosk language_school letter_box library loading_dock marketplace monastery motorcycle_parking
        music_school nightclub nursing_home parcel_locker parking parking_entrance parking_space
        pharmacy photo_booth place_of_worship police post_box post_depot post_office prison pub
        public_bath public_bookcase ranger_station recycling restaurant school shelter shower
        social_centre social_facility stripclub studio taxi telephone theatre toilets townhall
        training university vending_machine veterinary waste_basket waste_disposal waste_transfer_station
        water_point watering_place animal_boarding animal_shelter baby_hatch boat_sharing brothel
        dive_centre funeral_hall love_hotel mortuary money_transfer payment_terminal refugee_site
        sanitary_dump_station swingerclub ticket_validator weighbridge
    """,
    "shop": """
        alcohol antiques appliance art bakery beauty bed beverages bicycle boat bookmaker books
        boutique butcher car car_parts car_repair carpet charity cheese chemist chocolate clothes
        coffee computer confectionery convenience copyshop cosmetics craft curtain dairy deli
        department_store doityourself doors dry_cleaning e-cigarette electrical electronics erotic
        fabric farm fashion_accessories fishing flooring florist frame frozen_food fuel funeral_directors
        furniture garden_centre gas general gift glaziery greengrocer hairdresser hairdresser_supply
        hardware health_food hearing_aids herbalist hifi houseware interior_decoration jewelry kiosk
        kitchen laundry leather lighting locksmith lottery mall massage medical_supply mobile_phone
        money_lender motorcycle music musical_instrument newsagent nutrition_supplements optician
        outdoor paint pastry pawnbroker perfumery pet pet_grooming photo pottery printer_ink pyrotechnics
        radiotechnics religion rental seafood second_hand sewing shoe_repair shoes spices sports
        stationery storage_rental supermarket tailor tattoo tea telecommunication ticket tiles tobacco
        tool_hire toys trade travel_agency tyres vacant vacuum_cleaner variety_store video video_games
        watches water weapons wholesale wine
    """,
    "building": """
        apartments barracks bungalow cabin detached dormitory farm ger hotel house houseboat residential
        semidetached_house static_caravan stilt_house terrace tree_house commercial industrial kiosk
        office retail supermarket warehouse cathedral chapel church monastery mosque religious shrine
        synagogue temple bakehouse civic college fire_station government hospital kindergarten public
        school toilets train_station transportation university barn conservatory cowshed farm_auxiliary
        greenhouse slurry_tank stable sty grandstand pavilion riding_hall sports_hall stadium
        allotment_house boathouse hangar hut shed carport garage garages parking digester service
        transformer_tower water_tower storage_tank bridge bunker castle construction container
        military roof ruins tower yes
    """,
    "highway": """
        motorway trunk primary secondary tertiary unclassified residential motorway_link trunk_link
        primary_link secondary_link tertiary_link living_street service pedestrian track bus_guideway
        escape raceway road busway footway bridleway steps corridor path cycleway sidewalk crossing
        elevator emergency_bay emergency_access_point give_way mini_roundabout motorway_junction
        passing_place platform rest_area speed_camera street_lamp services stop traffic_mirror
        traffic_signals trailhead turning_circle turning_loop toll_gantry bus_stop milestone
        construction proposed
    """,
    "landuse": """
        commercial construction education fairground industrial residential retail institutional
        aquaculture allotments farmland farmyard paddy animal_keeping flowerbed forest greenhouse_horticulture
        meadow orchard plant_nursery vineyard basin brownfield cemetery depot garages grass greenfield
        landfill military port quarry railway recreation_ground religious village_green winter_sports
        salt_pond
    """,
    "leisure": """
        adult_gaming_centre amusement_arcade bandstand beach_resort bird_hide common dance disc_golf_course
        dog_park escape_game firepit fishing fitness_centre fitness_station garden hackerspace horse_riding
        ice_rink marina miniature_golf nature_reserve outdoor_seating park picnic_table pitch playground
        resort sauna slipway sports_centre sports_hall stadium summer_camp swimming_area swimming_pool
        track water_park golf_course bleachers
    """,
    "tourism": """
        alpine_hut apartment aquarium artwork attraction camp_pitch camp_site caravan_site chalet gallery
        guest_house hostel hotel information motel museum picnic_site theme_park viewpoint wilderness_hut
        zoo
    """,
    "historic": """
        aircraft anchor aqueduct archaeological_site battlefield boundary_stone building cannon castle
        castle_wall charcoal_pile church city_gate citywalls farm fort gallows highwater_mark locomotive
        manor memorial milestone mine monastery monument optical_telegraph pillory railway_car ruins
        rune_stone ship tank tomb tower vehicle wayside_cross wayside_shrine wreck
    """,
    "railway": """
        abandoned construction disused funicular light_rail miniature monorail narrow_gauge preserved rail
        subway tram halt platform station subway_entrance tram_stop buffer_stop derail crossing
        level_crossing railway_crossing signal switch turntable roundhouse traverser wash
    """,
    "public_transport": "platform station stop_position stop_area",
    "office": """
        accountant administrative advertising_agency architect association charity company consulting
        courier coworking diplomatic educational_institution employment_agency energy_supplier engineer
        estate_agent financial financial_advisor government graphic_design guide insurance it lawyer
        logistics moving_company newspaper ngo notary political_party property_management quango
        religion research security tax_advisor telecommunication therapist travel_agent union
        water_utility
    """,
    "craft": """
        agricultural_engines atelier bakery basket_maker beekeeper blacksmith boatbuilder bookbinder
        brewery builder cabinet_maker carpenter carpet_layer caterer chimney_sweeper cleaning clockmaker
        confectionery distillery dressmaker electrician electronics_repair floorer gardener glaziery
        handicraft hvac insulation jeweller joiner key_cutter locksmith metal_construction optician
        painter parquet_layer photographer photographic_laboratory plasterer plumber pottery rigger
        roofer saddler sailmaker sawmill scaffolder sculptor shoemaker stand_builder stonemason
        sun_protection tailor tiler tinsmith upholsterer watchmaker window_construction winery
    """,
    "man_made": """
        adit antenna beacon beehive breakwater bridge bunker_silo carpet_hanger chimney clearcut
        communications_tower crane cross cutline dovecote dyke embankment flagpole gasometer goods_conveyor
        groyne guard_stone kiln lighthouse mast mineshaft monitoring_station obelisk observatory
        offshore_platform petroleum_well pier pipeline pumping_station reservoir_covered silo
        storage_tank street_cabinet surveillance survey_point telescope tower wastewater_plant
        water_tap water_tower water_well water_works watermill windmill works
    """,
    "barrier": """
        cable_barrier city_wall ditch fence guard_rail handrail hedge kerb retaining_wall wall block
        bollard border_control bump_gate bus_trap cattle_grid chain cycle_barrier debris entrance
        full-height_turnstile gate hampshire_gate height_restrictor horse_stile jersey_barrier kissing_gate
        lift_gate log motorcycle_barrier rope sally_port spikes stile sump_buster swing_gate toll_booth
        turnstile planter
    """,
    "power": """
        cable catenary_mast compensator converter generator heliostat insulator line minor_line plant
        pole portal substation switch switchgear terminal tower transformer
    """,
    "emergency": """
        ambulance_station defibrillator landing_site emergency_ward_entrance assembly_point
        fire_extinguisher fire_hydrant fire_hose fire_alarm_box phone siren access_point lifeguard
        life_ring water_tank
    """,
    "healthcare": """
        alternative audiologist birthing_center blood_bank blood_donation counselling dentist dialysis
        doctor hospice laboratory midwife nurse occupational_therapist optometrist physiotherapist
        podiatrist psychotherapist rehabilitation sample_collection speech_therapist vaccination_centre
    """,
    "aeroway": """
        aerodrome apron gate hangar helipad heliport navigationaid runway spaceport taxiway terminal
        windsock
    """,
    "sport": """
        american_football archery athletics badminton baseball basketball beachvolleyball boules bowls
        boxing canoe chess climbing cricket cycling darts equestrian field_hockey fitness golf gymnastics
        handball ice_hockey ice_skating judo karate motor multi netball padel pilates rowing rugby_league
        rugby_union running sailing scuba_diving shooting skateboard skiing soccer softball squash
        swimming table_tennis tennis volleyball yoga
    """,
    "place": "city_block neighbourhood quarter square plot",
    "boundary": "administrative postal_code protected_area census political",
}

# excluded from the embedding vocabulary
EXTRA = {
    "natural": """
        fell grassland heath moor scrub shrubbery tree tree_row tundra wood bay beach blowhole cape coastline
        crevasse geyser glacier hot_spring isthmus mud peninsula reef shingle shoal spring strait water
        wetland arch arete bare_rock cave_entrance cliff dune earth_bank gully hill peak ridge rock saddle
        sand scree sinkhole stone valley volcano
    """,
    "waterway": """
        river riverbank stream tidal_channel canal drain ditch pressurised dam weir waterfall lock_gate
        dock boatyard fuel
    """,
    "water": "river oxbow canal ditch lock fish_pass lake reservoir pond basin lagoon",
    "wetland": "swamp reedbed bog marsh",
}

N_FULL = 754
N_EMBED = 681


def expand(groups):
    out = []
    for key, values in groups.items():
        for value in values.split():
            tag = f"{key}={value}"
            if tag not in out:
                out.append(tag)
    return out


# common tags that trimming must keep
KEEP = set("""
    amenity=parking amenity=restaurant amenity=fast_food amenity=cafe amenity=bench amenity=post_box amenity=place_of_worship amenity=school
    amenity=bank amenity=pharmacy amenity=pub amenity=bar amenity=fuel amenity=toilets amenity=police
    amenity=post_office amenity=hospital amenity=library amenity=taxi amenity=townhall amenity=university
    amenity=waste_basket amenity=recycling amenity=shelter amenity=vending_machine amenity=theatre
    shop=supermarket shop=bakery shop=convenience shop=hairdresser shop=clothes shop=car_repair
    shop=butcher shop=florist shop=mall shop=department_store shop=shoes shop=books shop=mobile_phone
""".split())


def trim(groups, n):
    """Drop tail values of the largest key families until ``n`` tags remain, sparing KEEP."""
    values = {k: list(dict.fromkeys(v.split())) for k, v in groups.items()}
    while sum(len(v) for v in values.values()) > n:
        biggest = max(values, key=lambda k: len(values[k]))
        vals = values[biggest]
        drop = next(i for i in range(len(vals) - 1, -1, -1) if f"{biggest}={vals[i]}" not in KEEP)
        vals.pop(drop)
    return {k: " ".join(v) for k, v in values.items()}


def main():
    core = expand(CORE)
    extra = expand(EXTRA)
    if len(core) < N_EMBED:
        raise SystemExit(f"core list too short: {len(core)}")
    embed = expand(trim(CORE, N_EMBED))
    full = (embed + extra)[:N_FULL]
    if len(full) < N_FULL:
        full += [t for t in core[N_EMBED:] if t not in full][: N_FULL - len(full)]
    assert len(full) == N_FULL and len(set(full)) == N_FULL
    assert len(embed) == N_EMBED and len(set(embed)) == N_EMBED
    data = Path(__file__).resolve().parents[1] / "src" / "lastmile" / "data"
    header = "# OSM sub-tags, one key=value per line\n"
    (data / "tags_754.txt").write_text(header + "\n".join(full) + "\n", encoding="utf-8")
    (data / "tags_681.txt").write_text(header + "\n".join(embed) + "\n", encoding="utf-8")
    print(f"core={len(core)} extra={len(extra)} full={len(full)} embed={len(embed)}")


if __name__ == "__main__":
    main()
