import json
from typing import List

import peewee as pw

db = pw.SqliteDatabase(":memory:")


class BaseModel(pw.Model):
    class Meta:
        database = db

    @classmethod
    def clear(cls):
        return cls.delete().execute()


class FloatListField(pw.TextField):
    def db_value(self, value) -> str:
        if value is None:
            value = []
        return json.dumps([float(v) for v in value])

    def python_value(self, value) -> List[float]:
        if value is None:
            return value
        return json.loads(value)
