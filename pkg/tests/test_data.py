import numpy as np
import pytest

from qrlife import (
    ColumnSchema,
    Dataset,
    FormulaSpec,
    ParseError,
    SchemaError,
    ValidationError,
    design_matrix,
    ingest_csv,
)


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


BASIC_SCHEMA = ColumnSchema(time="y", event="d", treatment="a")


def test_ingest_well_formed(tmp_path):
    path = write_csv(
        tmp_path / "d.csv",
        ["x1", "x2", "x3", "a", "y", "d"],
        [
            [0.1, -0.2, 1.0, 1, 2.5, 1],
            [0.0, 0.3, -1.5, 0, 1.0, 0],
            [1.2, 0.8, 0.2, 1, 0.7, 1],
            [-0.4, 0.1, 0.9, 0, 3.2, 1],
        ],
    )
    data = ingest_csv(path, BASIC_SCHEMA)
    assert data.n == 4
    assert data.covariate_names == ("x1", "x2", "x3")
    assert len(data.records) == 4
    rec = data.records[0]
    assert rec.treatment == 1 and rec.follow_up == 2.5 and rec.event == 1
    np.testing.assert_allclose(data.follow_up, [2.5, 1.0, 0.7, 3.2])


def test_ingest_negative_time_cites_row(tmp_path):
    path = write_csv(
        tmp_path / "d.csv",
        ["x1", "a", "y", "d"],
        [[0.1, 1, 2.0, 1], [0.5, 0, -1.0, 0], [0.2, 1, 1.0, 1]],
    )
    with pytest.raises(ValidationError, match="row 2"):
        ingest_csv(path, BASIC_SCHEMA)


def test_ingest_explicit_covariate_subset(tmp_path):
    # wide file in the style of a registry extract: many covariate columns,
    # only a named handful should survive
    rng = np.random.default_rng(3)
    extra = [f"c{i}" for i in range(60)]
    header = ["age", "bp", "hr", "sex", "apache", *extra, "a", "y", "d"]
    rows = []
    for i in range(8):
        vals = rng.normal(size=len(header) - 3).round(3).tolist()
        rows.append(vals + [i % 2, round(0.5 + i, 2), 1])
    path = write_csv(tmp_path / "wide.csv", header, rows)
    schema = ColumnSchema(
        time="y", event="d", treatment="a",
        covariates=("age", "bp", "hr", "sex", "apache"),
    )
    data = ingest_csv(path, schema)
    assert data.covariate_names == ("age", "bp", "hr", "sex", "apache")
    assert data.covariates.shape == (8, 5)
    # column subsetting preserves the file's values column by column
    raw = np.array([r[:5] for r in rows])
    np.testing.assert_allclose(data.covariates, raw)


def test_ingest_missing_column_named(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["x1", "a", "y"], [[1.0, 0, 1.0]])
    with pytest.raises(SchemaError, match="'d'"):
        ingest_csv(path, BASIC_SCHEMA)
    schema = ColumnSchema(time="y", event="d", treatment="a", covariates=("nope",))
    path2 = write_csv(tmp_path / "d2.csv", ["x1", "a", "y", "d"], [[1.0, 0, 1.0, 1]])
    with pytest.raises(SchemaError, match="'nope'"):
        ingest_csv(path2, schema)


def test_ingest_unparseable_cell_cites_row_and_column(tmp_path):
    path = write_csv(
        tmp_path / "d.csv",
        ["x1", "a", "y", "d"],
        [[0.1, 1, 2.0, 1], [0.2, 0, "oops", 1]],
    )
    with pytest.raises(ParseError, match="row 2.*'y'"):
        ingest_csv(path, BASIC_SCHEMA)


def test_ingest_non_binary_treatment(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["x1", "a", "y", "d"], [[0.1, 2, 1.0, 1]])
    with pytest.raises(ValidationError, match="treatment"):
        ingest_csv(path, BASIC_SCHEMA)


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        Dataset(np.empty((0, 1)), [], [], [], ("x1",))
    with pytest.raises(ValidationError, match="covariate names"):
        Dataset([[1.0, 2.0]], [1], [1.0], [1], ("x1",))
    with pytest.raises(ValidationError, match="event"):
        Dataset([[1.0]], [1], [1.0], [3], ("x1",))


def test_take_resamples_rows():
    data = Dataset([[1.0], [2.0], [3.0]], [0, 1, 0], [1.0, 2.0, 3.0], [1, 0, 1], ("x1",))
    sub = data.take([2, 0, 2])
    np.testing.assert_allclose(sub.covariates[:, 0], [3.0, 1.0, 3.0])
    np.testing.assert_allclose(sub.follow_up, [3.0, 1.0, 3.0])
    assert sub.covariate_names == ("x1",)


@pytest.fixture
def xyz_data():
    return Dataset([[2.0, 3.0, -1.0]], [1], [1.0], [1], ("x1", "x2", "x3"))


def test_design_matrix_square(xyz_data):
    spec = FormulaSpec((("linear", "x1"), ("square", "x1")), intercept=True)
    np.testing.assert_allclose(design_matrix(xyz_data, spec), [[1.0, 2.0, 4.0]])


def test_design_matrix_interaction(xyz_data):
    spec = FormulaSpec((("linear", "x1"), ("interaction", "x1", "x3")), intercept=False)
    np.testing.assert_allclose(design_matrix(xyz_data, spec), [[2.0, -2.0]])


def test_design_matrix_unknown_name(xyz_data):
    spec = FormulaSpec((("linear", "zz"),), intercept=True)
    with pytest.raises(SchemaError, match="'zz'"):
        design_matrix(xyz_data, spec)


def test_formula_rejects_duplicates():
    with pytest.raises(SchemaError, match="duplicate"):
        FormulaSpec((("linear", "x1"), ("linear", "x1")))


def test_formula_parse_tokens():
    spec = FormulaSpec.parse("x1, x1^2, x1:x3", intercept=True)
    assert spec.terms == (("linear", "x1"), ("square", "x1"), ("interaction", "x1", "x3"))
    assert spec.column_names() == ["(intercept)", "x1", "x1^2", "x1:x3"]


def test_design_matrix_commutes_with_permutation():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(20, 3))
    data = Dataset(X, rng.integers(0, 2, 20), rng.exponential(1, 20),
                   rng.integers(0, 2, 20), ("x1", "x2", "x3"))
    spec = FormulaSpec.parse("x1,x2^2,x1:x3")
    perm = rng.permutation(20)
    permuted = data.take(perm)
    np.testing.assert_array_equal(design_matrix(permuted, spec), design_matrix(data, spec)[perm])


def test_ingest_permuted_file_commutes_with_design(tmp_path):
    rng = np.random.default_rng(21)
    header = ["x1", "x2", "a", "y", "d"]
    rows = [
        [round(float(rng.normal()), 6), round(float(rng.normal()), 6),
         int(rng.integers(0, 2)), round(float(rng.exponential(1)) + 0.01, 6),
         int(rng.integers(0, 2))]
        for _ in range(15)
    ]
    base = write_csv(tmp_path / "base.csv", header, rows)
    perm = rng.permutation(15)
    permuted = write_csv(tmp_path / "perm.csv", header, [rows[i] for i in perm])
    spec = FormulaSpec.parse("x1,x2,x1^2,x1:x2")
    d1 = design_matrix(ingest_csv(base, BASIC_SCHEMA), spec)
    d2 = design_matrix(ingest_csv(permuted, BASIC_SCHEMA), spec)
    np.testing.assert_array_equal(d2, d1[perm])
