import json

import pytest

from crash_recon.core.errors import CaseParseError, CaseSchemaError
from crash_recon.schemas.case import (
    MAX_SLOTS,
    Avoidance,
    FieldStatus,
    ImpactSide,
    Lighting,
    PreMovement,
    VehicleCategory,
)
from crash_recon.services.ingest import dumps_case, ingest_case, parse_direction, parse_speed, serialize_case


def test_ingest_populates_slots_and_fields(doc_case):
    assert doc_case.valid_slots() == [0, 1]
    assert len(doc_case.vehicles) == MAX_SLOTS
    v0, v1 = doc_case.vehicles[:2]
    assert v0.category == VehicleCategory.PASSENGER
    assert v1.category == VehicleCategory.SUV
    assert v0.avoidance == Avoidance.BRAKING
    assert v0.speed_limit == pytest.approx(35 * 0.44704)
    assert v1.speed_limit == pytest.approx(15.6)
    assert v0.travel_direction == (1.0, 0.0)
    assert doc_case.annotations.impact_sides[:2] == [ImpactSide.FRONT, ImpactSide.REAR]
    assert doc_case.annotations.collision_pair == (0, 1)
    assert doc_case.scene.lighting == Lighting.DAYLIGHT
    assert doc_case.edr[1] is None
    assert v1.field_status("edr") == FieldStatus.MISSING
    assert all(v0.field_status(f) == FieldStatus.PRESENT for f in ("trajectory", "edr", "initial_lane", "impact_area"))


def test_feet_and_mph_are_converted(case_doc):
    case_doc["units"] = {"length": "ft", "speed": "mph"}
    case = ingest_case(case_doc)
    assert case.raw_points[0][0][0] == pytest.approx(-60 * 0.3048)
    assert case.geometry.lane("lane-1").points[0][1] == pytest.approx(3.6 * 0.3048)
    assert case.edr[0][0] == (-5.0, pytest.approx(20 * 0.44704))
    assert case.annotations.accident_location[0] == pytest.approx(1.5 * 0.3048)


@pytest.mark.parametrize("text, expected", [
    ("north", (0.0, 1.0)),
    ("SB", (0.0, -1.0)),
    ("Westbound", (-1.0, 0.0)),
    ("east_bound", (1.0, 0.0)),
    ([3.0, 4.0], (0.6, 0.8)),
    ("up the hill", None),
    ([0.0, 0.0], None),
])
def test_parse_direction(text, expected):
    result = parse_direction(text)
    if expected is None:
        assert result is None
    else:
        assert result == pytest.approx(expected)


@pytest.mark.parametrize("value, expected", [
    ("35 mph", 35 * 0.44704),
    ("50 km/h", 50 / 3.6),
    ("12", 12.0),
    (12, 12.0),
    (-3, None),
    ("fast", None),
])
def test_parse_speed(value, expected):
    result = parse_speed(value, 1.0)
    if expected is None:
        assert result is None
    else:
        assert result == pytest.approx(expected)


def test_unknown_and_malformed_are_distinguished(case_doc):
    vehicle = case_doc["vehicles"][0]
    vehicle.update(pre_movement="unknown", avoidance="swerved wildly", initial_lane="lane-9",
                   speed_limit="very fast", trajectory="see sketch")
    del vehicle["impact_side"]
    v = ingest_case(case_doc).vehicles[0]

    assert v.pre_movement == PreMovement.UNKNOWN
    assert v.field_status("pre_movement") == FieldStatus.UNKNOWN
    assert v.avoidance == Avoidance.UNKNOWN
    assert v.field_status("avoidance") == FieldStatus.MALFORMED
    assert v.raw_fields["avoidance"] == "swerved wildly"
    assert v.initial_lane is None
    assert v.field_status("initial_lane") == FieldStatus.MALFORMED
    assert v.field_status("speed_limit") == FieldStatus.MALFORMED
    assert v.field_status("trajectory") == FieldStatus.MALFORMED
    assert v.field_status("impact_area") == FieldStatus.MISSING


def test_underscored_enum_values_are_accepted(case_doc):
    case_doc["vehicles"][0]["pre_movement"] = "Lane_Change"
    assert ingest_case(case_doc).vehicles[0].pre_movement == PreMovement.LANE_CHANGE


def test_edr_is_sorted_deduplicated_and_clipped(case_doc):
    case_doc["vehicles"][0]["edr"] = [[0.0, 10.0], [-6.0, 30.0], [-1.0, 12.0], [-1.0, 99.0], [0.5, 1.0]]
    assert ingest_case(case_doc).edr[0] == [(-1.0, 12.0), (0.0, 10.0)]


def test_degenerate_polylines_are_dropped(case_doc):
    case_doc["geometry"]["curves"].append({"id": "dot", "category": "edge", "points": [[1.0, 1.0], [1.0, 1.0]]})
    case_doc["geometry"]["curves"].append({"id": "odd", "category": "hedge", "points": [[0.0, 9.0], [5.0, 9.0]]})
    case = ingest_case(case_doc)
    ids = [p.id for p in case.geometry.curves]
    assert "dot" not in ids
    assert case.geometry.curves[ids.index("odd")].category.value == "other"


def test_serialize_round_trips(case_doc):
    case_doc["vehicles"][0].update(avoidance="swerved wildly", initial_lane="lane-9")
    case = ingest_case(case_doc)
    again = ingest_case(serialize_case(case))
    assert again == case
    assert ingest_case(dumps_case(case)) == case


def test_dumps_is_stable(doc_case):
    text = dumps_case(doc_case)
    assert text == dumps_case(ingest_case(text))
    assert json.loads(text)["units"] == {"length": "m", "speed": "m/s"}


def test_bad_json_reports_byte_offset():
    with pytest.raises(CaseParseError) as info:
        ingest_case('{"case_id": "é", oops}')
    assert info.value.offset == len('{"case_id": "é", '.encode("utf-8"))


def test_out_of_range_numbers_are_malformed(case_doc):
    vehicle = case_doc["vehicles"][0]
    vehicle.update(speed_limit=10 ** 400, trajectory=[[10 ** 400, 0.0], [-1.0, 0.0, 10 ** 400]])
    case_doc["vehicles"][1]["speed_limit"] = "9" * 400 + " mph"
    case = ingest_case(json.dumps(case_doc))
    v0, v1 = case.vehicles[:2]
    assert v0.speed_limit is None
    assert v0.field_status("speed_limit") == FieldStatus.MALFORMED
    assert v0.field_status("trajectory") == FieldStatus.MALFORMED
    assert v1.speed_limit is None
    assert v1.field_status("speed_limit") == FieldStatus.MALFORMED


def test_unconvertible_integer_literal_is_a_parse_error():
    with pytest.raises(CaseParseError):
        ingest_case('{"case_id": ' + "1" * 5000 + "}")


def test_invalid_utf8_is_a_parse_error():
    with pytest.raises(CaseParseError):
        ingest_case(b'{"case_id": "\xff"}')


@pytest.mark.parametrize("pair", [[0, 0], [0, 3], [0], ["0", "1"]])
def test_collision_pair_must_name_valid_slots(case_doc, pair):
    case_doc["annotations"]["collision_pair"] = pair
    with pytest.raises(CaseSchemaError) as info:
        ingest_case(case_doc)
    assert info.value.field == "annotations.collision_pair"


def test_unsupported_units_are_schema_errors(case_doc):
    case_doc["units"]["length"] = "furlong"
    with pytest.raises(CaseSchemaError):
        ingest_case(case_doc)


def test_out_of_range_slots_are_dropped(case_doc):
    case_doc["vehicles"].append({"slot": 7, "category": "van"})
    case_doc["vehicles"].append({"slot": 1, "category": "van"})
    case = ingest_case(case_doc)
    assert case.valid_slots() == [0, 1]
    assert case.vehicles[1].category == VehicleCategory.SUV
