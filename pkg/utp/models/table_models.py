from typing import List, Set, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class Table(BaseModel):
    """Header row plus data rows of string cells."""

    header: List[str] = Field(..., description="Column names, at least one, none empty")
    rows: List[List[str]] = Field(default_factory=list, description="Data rows, each len(header) cells")

    @field_validator('header')
    @classmethod
    def validate_header(cls, v):
        """Require a non-empty header of non-empty cells."""
        if not v:
            raise ValueError('Table header must have at least one cell')
        if any(not cell for cell in v):
            raise ValueError('Header cells cannot be empty')
        return v

    @model_validator(mode='after')
    def validate_rectangular(self):
        """Every row must have exactly one cell per header column."""
        for i, row in enumerate(self.rows):
            if len(row) != len(self.header):
                raise ValueError(
                    f'Row {i + 1} has {len(row)} cells but the header has {len(self.header)}'
                )
        return self

    @property
    def n_columns(self) -> int:
        return len(self.header)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def column(self, index: int) -> List[str]:
        """Data cells of one column, header excluded."""
        return [row[index] for row in self.rows]

    def cell(self, row: int, column: int) -> str:
        """Cell at 1-based data row ``row`` and 1-based ``column``; row 0 is the header."""
        if row == 0:
            return self.header[column - 1]
        return self.rows[row - 1][column - 1]


class TableTextPair(BaseModel):
    """An aligned <table, text> example."""

    id: str = Field(..., description="Identifier unique within a corpus")
    text: str = Field(..., description="Sentence aligned with the table")
    table: Table = Field(..., description="The structured side of the pair")

    @field_validator('id')
    @classmethod
    def validate_id(cls, v):
        if not v:
            raise ValueError('Pair id cannot be empty')
        return v

    @field_validator('text')
    @classmethod
    def validate_text(cls, v):
        if not v.strip():
            raise ValueError('Pair text cannot be empty')
        return v


class Corpus(BaseModel):
    """Ordered collection of pairs with the seed that governs its split."""

    pairs: List[TableTextPair] = Field(default_factory=list, description="Pairs in file order")
    split_seed: int = Field(default=0, description="Seed of the train/dev partition")

    @model_validator(mode='after')
    def validate_unique_ids(self):
        seen: Set[str] = set()
        for pair in self.pairs:
            if pair.id in seen:
                raise ValueError(f'Duplicate pair id: {pair.id}')
            seen.add(pair.id)
        return self

    def __len__(self) -> int:
        return len(self.pairs)

    def ids(self) -> List[str]:
        return [p.id for p in self.pairs]

    def by_id(self) -> dict:
        return {p.id: p for p in self.pairs}


class QAExample(BaseModel):
    """A question over a table with its gold answer cells (1-based, data rows only)."""

    pair: TableTextPair = Field(..., description="text holds the question")
    gold_cells: List[Tuple[int, int]] = Field(..., description="(row, column) coordinates of answers")

    @model_validator(mode='after')
    def validate_gold_cells(self):
        if not self.gold_cells:
            raise ValueError('gold_cells cannot be empty')
        table = self.pair.table
        for row, col in self.gold_cells:
            if not (1 <= row <= table.n_rows and 1 <= col <= table.n_columns):
                raise ValueError(
                    f'Gold cell ({row}, {col}) lies outside the {table.n_rows}x{table.n_columns} table'
                )
        return self

    @property
    def gold_set(self) -> Set[Tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.gold_cells}

    def to_record(self) -> dict:
        """Flat JSONL record: pair keys followed by gold_cells."""
        record = self.pair.model_dump()
        record['gold_cells'] = [[r, c] for r, c in self.gold_cells]
        return record
