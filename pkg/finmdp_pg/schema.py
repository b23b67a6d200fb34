from __future__ import annotations

import jsonschema
from jsonschema.exceptions import best_match

from finmdp_pg.logger import logger

_IDENTIFIER = {"type": ["string", "integer"]}
_NUMBER_MAP = {"type": "object", "additionalProperties": {"type": "number"}}

MODEL_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "Finite-horizon MDP model",
    "type": "object",
    "properties": {
        "horizon": {"type": "integer", "minimum": 1},
        "r_star": {"type": "number", "exclusiveMinimum": 0},
        "start": _NUMBER_MAP,
        "epochs": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "states": {"type": "array", "minItems": 1, "items": _IDENTIFIER},
                    "actions": {
                        "type": "object",
                        "additionalProperties": {"type": "array", "items": _IDENTIFIER},
                    },
                    "rewards": {
                        "type": "object",
                        "additionalProperties": _NUMBER_MAP,
                    },
                    "transitions": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "additionalProperties": _NUMBER_MAP,
                        },
                    },
                },
                "required": ["states", "actions", "rewards"],
            },
        },
    },
    "required": ["horizon", "epochs", "r_star"],
}

CHECKPOINT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "Softmax parameter checkpoint",
    "type": "object",
    "properties": {
        "epochs": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": _NUMBER_MAP,
            },
        },
    },
    "required": ["epochs"],
}


class SchemaValidator:
    def __init__(self, schema):
        """
        Args:
            schema (dict): Draft 7 JSON schema.

        Raises:
            jsonschema.exceptions.SchemaError: If the schema itself is invalid.
        """
        jsonschema.Draft7Validator.check_schema(schema)
        self.schema = schema
        self.validator = jsonschema.Draft7Validator(self.schema)

    def validate(self, instance, source="document"):
        """
        Validate a JSON document and report the most relevant error with its path,
        e.g. `epochs/0/rewards/s/a1`.

        Args:
            instance: Parsed JSON document.
            source (str, optional): Name of the document for the log message.

        Raises:
            jsonschema.exceptions.ValidationError: If validation fails.
        """
        error = best_match(self.validator.iter_errors(instance))
        if error is not None:
            location = "/".join(str(part) for part in error.absolute_path) or "<root>"
            logger.error(f"{source} is invalid at {location}: {error.message}")
            raise error

    def iter_errors(self, instance):
        """All validation errors of `instance`, in no particular order."""
        return self.validator.iter_errors(instance)


model_validator = SchemaValidator(MODEL_SCHEMA)
checkpoint_validator = SchemaValidator(CHECKPOINT_SCHEMA)
