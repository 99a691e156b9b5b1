import hashlib
from collections import Counter

import numpy as np
import pytest

from graphlay.concepts import SectionConceptMap, extract_article_concepts
from graphlay.corpus import Article, Concept, Lexicon, Section, SemType, generate_synthetic_corpus
from graphlay.errors import GraphError
from graphlay.graph import (
    ArticleGraph,
    Node,
    build_graph,
    gat_input_graph,
    graph_stats,
    hashed_bow,
    init_node_features,
    parse_graph,
    rwpe,
    serialize_graph,
    validate_graph,
)

MIN_LEX = Lexicon(
    concepts={"C1": Concept(("Cells",), "basic units", ("T1",))},
    semtypes={"T1": SemType("Cell", "smallest unit")},
    relations=(),
)

ABS_ONLY = Article(
    id="a1",
    title="Title words",
    keywords=("kw",),
    pub_date="2024-03-04",
    abstract=Section("Abstract", "Cells everywhere."),
    sections=(),
)

ABS_MAP = SectionConceptMap(concepts={-1: frozenset({"C1"})}, order={-1: ("C1",)})


class TestBuildGraph:
    def test_minimal_graph_contents(self):
        g = build_graph(ABS_ONLY, ABS_MAP, MIN_LEX)
        types = Counter(n.type for n in g.nodes)
        assert types == {"Document": 1, "Section": 1, "Metadata": 4, "Concept": 1, "SemType": 1}
        rels = Counter(e[1] for e in g.edges)
        # Document->Section and Section->Concept both use `contains`
        assert rels == {
            "contains": 2,
            "is_a": 1,
            "has_title": 2,
            "has_keyword": 1,
            "was_published_in": 1,
        }
        assert ("a1", "contains", "a1_Abs") in g.edges
        assert ("a1_Abs", "contains", "C1") in g.edges
        assert ("C1", "is_a", "T1") in g.edges

    def test_registry_relation_instantiated(self):
        lex = Lexicon(
            concepts=MIN_LEX.concepts,
            semtypes=MIN_LEX.semtypes,
            relations=(("T1", "affects", "T1"),),
        )
        g = build_graph(ABS_ONLY, ABS_MAP, lex)
        assert ("T1", "affects", "T1") in g.edges

    def test_relation_skipped_when_semtype_absent(self):
        lex = Lexicon(
            concepts=MIN_LEX.concepts,
            semtypes={**MIN_LEX.semtypes, "T2": SemType("Other", "d")},
            relations=(("T1", "affects", "T2"),),
        )
        g = build_graph(ABS_ONLY, ABS_MAP, lex)
        assert not any(e[1] == "affects" for e in g.edges)

    def test_dangling_concept_rejected(self):
        bad_map = SectionConceptMap(concepts={-1: frozenset({"C9"})}, order={-1: ("C9",)})
        with pytest.raises(GraphError, match="dangling"):
            build_graph(ABS_ONLY, bad_map, MIN_LEX)

    def test_fixture_article_node_counts(self, hand_article, lexicon):
        scmap = extract_article_concepts(hand_article, lexicon)
        g = build_graph(hand_article, scmap, lexicon)
        types = Counter(n.type for n in g.nodes)
        # hand oracle: title + 2 keywords + date + 3 distinct section titles
        assert types["Document"] == 1
        assert types["Section"] == 3
        assert types["Metadata"] == 7
        # union of per-section gold concepts: C0002-4, C0009-12
        assert types["Concept"] == 7
        # semtypes of those concepts: T001, T002, T005, T006, T004 (via C0012)
        assert types["SemType"] == 5
        assert {n.id for n in g.nodes if n.type == "Section"} == {
            "hand-001_Abs",
            "hand-001_Sec0",
            "hand-001_Sec1",
        }

    def test_invariants_on_synthetic_batch(self, lexicon):
        for art in generate_synthetic_corpus(21, 10, lexicon):
            g = build_graph(art, extract_article_concepts(art, lexicon), lexicon)
            validate_graph(g)  # raises on violation


class TestValidateGraph:
    def test_duplicate_document_rejected(self):
        g = ArticleGraph(
            nodes=(Node("d1", "Document"), Node("d2", "Document")),
            edges=(("d1", "contains", "d2"),),
        )
        with pytest.raises(GraphError, match="Document"):
            validate_graph(g)

    def test_unreachable_node_rejected(self):
        g = ArticleGraph(
            nodes=(Node("d", "Document"), Node("d_Abs", "Section"), Node("x", "Metadata")),
            edges=(("d", "contains", "d_Abs"),),
        )
        with pytest.raises(GraphError, match="unreachable"):
            validate_graph(g)

    def test_bad_section_labels_rejected(self):
        g = ArticleGraph(
            nodes=(Node("d", "Document"), Node("d_Sec1", "Section")),
            edges=(("d", "contains", "d_Sec1"),),
        )
        with pytest.raises(GraphError, match="label"):
            validate_graph(g)

    def test_concept_without_is_a_rejected(self):
        g = ArticleGraph(
            nodes=(Node("d", "Document"), Node("d_Abs", "Section"), Node("C1", "Concept")),
            edges=(("d", "contains", "d_Abs"), ("d_Abs", "contains", "C1")),
        )
        with pytest.raises(GraphError, match="is_a"):
            validate_graph(g)


def _chain(n):
    nodes = tuple(Node(f"n{i}", "Concept") for i in range(n))
    edges = tuple((f"n{i}", "affects", f"n{i+1}") for i in range(n - 1))
    return ArticleGraph(nodes=nodes, edges=edges)


class TestRwpe:
    def test_two_node_path(self):
        out = rwpe(_chain(2), 2)
        assert np.array_equal(out, np.array([[0.0, 1.0], [0.0, 1.0]]))

    def test_isolated_node_zeroes(self):
        g = ArticleGraph(nodes=(Node("a", "Concept"),), edges=())
        assert np.array_equal(rwpe(g, 4), np.zeros((1, 4)))

    def test_triangle_diag_zero_at_k1(self):
        g = ArticleGraph(
            nodes=tuple(Node(x, "Concept") for x in "abc"),
            edges=(("a", "affects", "b"), ("b", "affects", "c"), ("c", "affects", "a")),
        )
        assert np.array_equal(rwpe(g, 1), np.zeros((3, 1)))

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = rng.integers(2, 12)
            nodes = tuple(Node(f"n{i}", "Concept") for i in range(n))
            edges = tuple(
                (f"n{a}", "affects", f"n{b}")
                for a, b in rng.integers(0, n, size=(n * 2, 2))
                if a != b
            )
            out = rwpe(ArticleGraph(nodes=nodes, edges=edges), 6)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            n = int(rng.integers(3, 14))
            pairs = {(int(a), int(b)) for a, b in rng.integers(0, n, size=(n * 2, 2)) if a != b}
            nodes = tuple(Node(f"n{i:02d}", "Concept") for i in range(n))
            edges = tuple((f"n{a:02d}", "affects", f"n{b:02d}") for a, b in sorted(pairs))
            base = rwpe(ArticleGraph(nodes=nodes, edges=edges), 5)
            perm = rng.permutation(n)
            # relabel node i -> position perm[i]; node order still sorted by id
            renamed = {f"n{i:02d}": f"n{perm[i]:02d}" for i in range(n)}
            p_edges = tuple((renamed[a], r, renamed[b]) for a, r, b in edges)
            permuted = rwpe(ArticleGraph(nodes=nodes, edges=p_edges), 5)
            for i in range(n):
                assert np.max(np.abs(permuted[perm[i]] - base[i])) < 1e-12

    def test_cycle_rows_identical(self):
        n = 6
        nodes = tuple(Node(f"n{i}", "Concept") for i in range(n))
        edges = tuple((f"n{i}", "affects", f"n{(i+1) % n}") for i in range(n))
        out = rwpe(ArticleGraph(nodes=nodes, edges=edges), 6)
        assert np.max(np.abs(out - out[0])) < 1e-12


class TestNodeFeatures:
    def test_identical_definitions_share_text_rows(self):
        lex = Lexicon(
            concepts={
                "C1": Concept(("Aaa",), "same words here", ("T1",)),
                "C2": Concept(("Bbb",), "same words here", ("T1",)),
            },
            semtypes={"T1": SemType("T", "d")},
            relations=(),
        )
        art = Article(
            id="a",
            title="t",
            keywords=(),
            pub_date="2024-01-01",
            abstract=Section("Abstract", "Aaa and Bbb."),
            sections=(),
        )
        scmap = SectionConceptMap(concepts={-1: frozenset({"C1", "C2"})}, order={-1: ("C1", "C2")})
        g = build_graph(art, scmap, lex)
        feats = init_node_features(g, art, lex, d_text=16, K=3)
        idx = {nid: i for i, nid in enumerate(feats.node_ids)}
        assert np.array_equal(
            feats.features[idx["C1"], :16], feats.features[idx["C2"], :16]
        )

    def test_title_metadata_excluded(self, hand_article, lexicon):
        scmap = extract_article_concepts(hand_article, lexicon)
        g = build_graph(hand_article, scmap, lexicon)
        sub = gat_input_graph(g)
        titles = {dst for _, rel, dst in g.edges if rel == "has_title"}
        assert titles
        assert not titles & set(n.id for n in sub.nodes)
        # keyword and date metadata stay
        kept_meta = [n for n in sub.nodes if n.type == "Metadata"]
        assert {n.id for n in kept_meta} == {"sleep", "memory", "2023-05-10"}

    def test_empty_title_zero_text_row(self):
        art = Article(
            id="a",
            title="t",
            keywords=(),
            pub_date="2024-01-01",
            abstract=Section("", "Cells."),
            sections=(),
        )
        g = build_graph(art, ABS_MAP, MIN_LEX)
        feats = init_node_features(g, art, MIN_LEX, d_text=16, K=3)
        idx = {nid: i for i, nid in enumerate(feats.node_ids)}
        row = feats.features[idx["a_Abs"]]
        assert np.array_equal(row[:16], np.zeros(16))
        assert row[16:21].sum() == 1.0

    def test_matrix_matches_independent_hash_oracle(self, hand_article, lexicon):
        scmap = extract_article_concepts(hand_article, lexicon)
        g = build_graph(hand_article, scmap, lexicon)
        d_text = 32
        feats = init_node_features(g, hand_article, lexicon, d_text=d_text, K=4)

        def oracle_bow(text):
            vec = np.zeros(d_text)
            from graphlay.corpus import tokenize

            for tok in tokenize(text):
                digest = hashlib.blake2b(tok.surface.lower().encode(), digest_size=8).digest()
                v = int.from_bytes(digest, "big")
                vec[v % d_text] += 1.0 if v >> 63 == 0 else -1.0
            n = np.linalg.norm(vec)
            return vec / n if n > 0 else vec

        idx = {nid: i for i, nid in enumerate(feats.node_ids)}
        checks = {
            "C0012": lexicon.concepts["C0012"].definition,
            "T006": lexicon.semtypes["T006"].definition,
            "hand-001": hand_article.title,
            "hand-001_Sec0": "Methods",
            "2023-05-10": "2023-05-10",
        }
        for nid, text in checks.items():
            assert np.allclose(feats.features[idx[nid], :d_text], oracle_bow(text))

    def test_l2_normalized(self, hand_article, lexicon):
        scmap = extract_article_concepts(hand_article, lexicon)
        g = build_graph(hand_article, scmap, lexicon)
        feats = init_node_features(g, hand_article, lexicon, d_text=16, K=2)
        norms = np.linalg.norm(feats.features[:, :16], axis=1)
        assert np.all((np.abs(norms - 1.0) < 1e-12) | (norms == 0.0))


class TestStats:
    def test_single_minimal_graph(self):
        g = build_graph(ABS_ONLY, ABS_MAP, MIN_LEX)
        report = graph_stats([g])
        for t in ("Document", "Section", "Concept", "SemType"):
            assert report.node_type_means[t] == pytest.approx(1.0)

    def test_mean_of_identical_graphs(self):
        g = build_graph(ABS_ONLY, ABS_MAP, MIN_LEX)
        one = graph_stats([g])
        three = graph_stats([g, g, g])
        assert one.node_type_means == three.node_type_means
        assert one.relation_means == three.relation_means

    def test_markdown_contains_all_types(self):
        g = build_graph(ABS_ONLY, ABS_MAP, MIN_LEX)
        md = graph_stats([g]).to_markdown()
        for t in ("Document", "Section", "Metadata", "Concept", "SemType"):
            assert t in md


class TestSerialization:
    def test_round_trip_byte_identical(self, hand_article, lexicon):
        scmap = extract_article_concepts(hand_article, lexicon)
        g = build_graph(hand_article, scmap, lexicon)
        data = serialize_graph(g)
        assert serialize_graph(parse_graph(data)) == data

    def test_corrupt_type_tag(self):
        with pytest.raises(GraphError, match="node type"):
            parse_graph(b'{"nodes": [{"id": "x", "type": "Banana"}], "edges": []}')

    def test_malformed_json(self):
        with pytest.raises(GraphError, match="malformed"):
            parse_graph(b"{nope")

    def test_hand_written_file(self):
        data = (
            b'{"edges": [["d", "contains", "d_Abs"]], '
            b'"nodes": [{"id": "d", "type": "Document"}, {"id": "d_Abs", "type": "Section"}]}'
        )
        g = parse_graph(data)
        assert g.nodes == (Node("d", "Document"), Node("d_Abs", "Section"))
        assert g.edges == (("d", "contains", "d_Abs"),)
