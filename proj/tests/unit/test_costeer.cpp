#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>

#include "quantloop/costeer.hpp"

using namespace quantloop;

namespace {

TaskNode task(const std::string& id, const std::string& description = "",
              double alpha = 1.0) {
    TaskNode t;
    t.id = id;
    t.description = description.empty() ? ("task " + id) : description;
    t.complexity_alpha = alpha;
    return t;
}

Implementer stub_implementer(const std::string& artifact = "artifact") {
    return [artifact](const TaskNode&, const std::optional<KbTriple>&, const std::string&, int) {
        return artifact;
    };
}

TaskEvaluator always_ok() {
    return [](const TaskNode&, const std::string&) { return std::pair{true, std::string("ok")}; };
}

// fails the first `n` evaluations of each task, then succeeds
TaskEvaluator fail_first_n(int n) {
    auto counts = std::make_shared<std::map<std::string, int>>();
    return [counts, n](const TaskNode& t, const std::string&) {
        const int seen = (*counts)[t.id]++;
        if (seen < n) return std::pair{false, std::string("failed attempt")};
        return std::pair{true, std::string("ok")};
    };
}

bool order_respects_edges(const std::vector<std::string>& order,
                          const std::vector<std::pair<std::string, std::string>>& edges) {
    std::map<std::string, int> pos;
    for (std::size_t k = 0; k < order.size(); ++k) pos[order[k]] = static_cast<int>(k);
    for (const auto& [from, to] : edges) {
        if (pos.count(from) && pos.count(to) && pos[from] > pos[to]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("update_task_order is simplest-first within topological constraints") {
    SECTION("a chain is forced") {
        TaskDag dag({task("A"), task("B"), task("C")}, {{"A", "B"}, {"B", "C"}});
        CHECK(update_task_order(dag) == std::vector<std::string>{"A", "B", "C"});
    }

    SECTION("independent tasks run simplest first") {
        TaskDag dag({task("A", "", 3.0), task("B", "", 1.0)}, {});
        CHECK(update_task_order(dag) == std::vector<std::string>{"B", "A"});
    }

    SECTION("equal complexity ties break by id") {
        TaskDag dag({task("Z"), task("M"), task("A")}, {});
        CHECK(update_task_order(dag) == std::vector<std::string>{"A", "M", "Z"});
    }

    SECTION("cycles are rejected with a witness") {
        try {
            TaskDag dag({task("A"), task("B")}, {{"A", "B"}, {"B", "A"}});
            FAIL("expected CycleDetected");
        } catch (const CycleDetected& e) {
            CHECK(e.cycle().size() >= 2);
        }
    }

    SECTION("resolved tasks drop out") {
        TaskDag dag({task("A"), task("B"), task("C")}, {{"A", "B"}, {"B", "C"}});
        CHECK(update_task_order(dag, {"A"}) == std::vector<std::string>{"B", "C"});
    }
}

TEST_CASE("edge weights expose the complexity ratios") {
    TaskDag dag({task("A", "", 2.0), task("B", "", 4.0)}, {{"A", "B"}});
    const auto w = edge_weights(dag);
    REQUIRE(w.size() == 1);
    CHECK(w[0].from == "A");
    CHECK(w[0].weight == 0.5);
}

TEST_CASE("builds-on markers become dependency edges") {
    auto dag = make_task_dag({task("mom_5", "momentum over 5 days"),
                              task("mom_combo", "composite factor; builds-on: mom_5; window 10"),
                              task("vol_20", "volatility over 20 days")});
    REQUIRE(dag.edges().size() == 1);
    CHECK(dag.edges()[0] == std::pair<std::string, std::string>{"mom_5", "mom_combo"});
    const auto order = update_task_order(dag);
    CHECK(order_respects_edges(order, dag.edges()));
}

TEST_CASE("token Jaccard similarity") {
    CHECK(token_jaccard("mean reversion 5 day", "mean reversion 10 day") == 0.6);
    CHECK(token_jaccard("abc", "abc") == 1.0);
    CHECK(token_jaccard("Mean-Reversion(5)", "mean reversion 5") == 1.0);  // case/punct folded
    CHECK(token_jaccard("", "") == 0.0);
    CHECK(token_jaccard("abc def", "xyz") == 0.0);
}

TEST_CASE("kb_retrieve returns the best match above the threshold") {
    CoSteerConfig cfg;
    KnowledgeBase kb;
    TaskNode query = task("q", "mean reversion 5 day");

    SECTION("empty kb gives nothing") {
        CHECK_FALSE(kb_retrieve(kb, query, cfg).has_value());
    }

    kb.add({"momentum breakout 20 day", "a0", "ok", true});
    kb.add({"mean reversion 10 day", "a1", "ok", true});
    kb.add({"mean reversion 5 day", "a2", "ok", true});

    SECTION("exact match wins") {
        const auto hit = kb_retrieve(kb, query, cfg);
        REQUIRE(hit.has_value());
        CHECK(hit->artifact == "a2");
    }

    SECTION("threshold is strict") {
        CoSteerConfig strict = cfg;
        strict.sim_threshold = 1.0;
        CHECK_FALSE(kb_retrieve(kb, query, strict).has_value());
    }

    SECTION("ties go to the most recent entry") {
        kb.add({"mean reversion 5 day", "a3", "ok", true});
        const auto hit = kb_retrieve(kb, query, cfg);
        REQUIRE(hit.has_value());
        CHECK(hit->artifact == "a3");
    }

    SECTION("below-threshold matches are never returned") {
        TaskNode far = task("f", "orthogonal subject entirely");
        CHECK_FALSE(kb_retrieve(kb, far, cfg).has_value());
    }
}

TEST_CASE("implement_task retries with feedback until success or the cap") {
    CoSteerConfig cfg;
    KnowledgeBase kb;

    SECTION("immediate success grows the kb by one") {
        auto t = task("T");
        const auto out = implement_task(t, kb, stub_implementer(), always_ok(), cfg);
        CHECK(out.success);
        CHECK(out.attempts == 1);
        CHECK(kb.size() == 1);
        CHECK(t.attempts == 1);
    }

    SECTION("two failures then success lands on attempt three") {
        auto t = task("T");
        const auto out = implement_task(t, kb, stub_implementer(), fail_first_n(2), cfg);
        CHECK(out.success);
        CHECK(out.attempts == 3);
        CHECK(kb.size() == 3);
    }

    SECTION("a hopeless task stops at the inner cap") {
        auto t = task("T");
        const auto out = implement_task(t, kb, stub_implementer(), fail_first_n(1000), cfg);
        CHECK_FALSE(out.success);
        CHECK(out.attempts == 10);
        CHECK(kb.size() == 10);
        CHECK(out.feedback == "failed attempt");
    }

    SECTION("the previous feedback reaches the next attempt") {
        auto t = task("T");
        std::vector<std::string> seen;
        Implementer impl = [&](const TaskNode&, const std::optional<KbTriple>&,
                               const std::string& prev, int) {
            seen.push_back(prev);
            return std::string("artifact");
        };
        implement_task(t, kb, impl, fail_first_n(2), cfg);
        REQUIRE(seen.size() == 3);
        CHECK(seen[0].empty());
        CHECK(seen[1] == "failed attempt");
    }

    SECTION("transport failures propagate") {
        auto t = task("T");
        Implementer broken = [](const TaskNode&, const std::optional<KbTriple>&,
                                const std::string&, int) -> std::string {
            throw ImplementerUnavailable("endpoint down");
        };
        CHECK_THROWS_AS(implement_task(t, kb, broken, always_ok(), cfg), ImplementerUnavailable);
    }
}

TEST_CASE("run_costeer reprioritizes after failures") {
    CoSteerConfig cfg;
    cfg.max_inner_iters = 1;  // one generate attempt per execution

    SECTION("a failing task yields so the other can succeed") {
        TaskDag dag({task("A"), task("B")}, {});
        KnowledgeBase kb;
        // A fails its first execution, B always succeeds
        TaskEvaluator eval = [counts = std::make_shared<std::map<std::string, int>>()](
                                 const TaskNode& t, const std::string&) mutable {
            if (t.id == "B") return std::pair{true, std::string("ok")};
            const int seen = (*counts)[t.id]++;
            return seen < 1 ? std::pair{false, std::string("fail")}
                            : std::pair{true, std::string("ok")};
        };
        const auto result = run_costeer(dag, stub_implementer(), eval, cfg, kb);
        CHECK(result.outcomes.at("A").success);
        CHECK(result.outcomes.at("B").success);

        // execution sequence: A fails, reorder puts B (alpha 1) before A (1.5)
        std::vector<std::string> sequence;
        for (const auto& e : result.trace) sequence.push_back(e.task_id);
        CHECK(sequence == std::vector<std::string>{"A", "B", "A"});
        CHECK(dag.node("A").complexity_alpha == 1.5);
        CHECK(dag.node("B").complexity_alpha == 1.0);
    }

    SECTION("all-success runs execute in the initial order") {
        TaskDag dag({task("C", "", 2.0), task("D", "", 1.0)}, {});
        KnowledgeBase kb;
        const auto result = run_costeer(dag, stub_implementer(), always_ok(), cfg, kb);
        std::vector<std::string> sequence;
        for (const auto& e : result.trace) sequence.push_back(e.task_id);
        CHECK(sequence == update_task_order(TaskDag({task("C", "", 2.0), task("D", "", 1.0)}, {})));
    }

    SECTION("failure then success leaves alpha at one plus delta") {
        TaskDag dag({task("E")}, {});
        KnowledgeBase kb;
        const auto result = run_costeer(dag, stub_implementer(), fail_first_n(1), cfg, kb);
        CHECK(result.outcomes.at("E").success);
        CHECK(dag.node("E").complexity_alpha == 1.0 + cfg.delta);
    }

    SECTION("hopeless tasks are abandoned after max_outer_rounds") {
        TaskDag dag({task("F")}, {});
        KnowledgeBase kb;
        const auto result = run_costeer(dag, stub_implementer(), fail_first_n(1000), cfg, kb);
        CHECK_FALSE(result.outcomes.at("F").success);
        CHECK(dag.node("F").complexity_alpha == 1.0 + 3 * cfg.delta);
        CHECK(kb.size() == 3);  // one generate per execution round
    }

    SECTION("every executed order is a valid topological order") {
        TaskDag dag({task("A"), task("B"), task("C"), task("D")},
                    {{"A", "C"}, {"B", "C"}, {"C", "D"}});
        KnowledgeBase kb;
        const auto result = run_costeer(dag, stub_implementer(), fail_first_n(1), cfg, kb);
        std::map<std::string, int> first_success;
        int step = 0;
        for (const auto& e : result.trace) {
            if (e.outcome == "success") first_success[e.task_id] = step;
            ++step;
        }
        for (const auto& [from, to] : dag.edges()) {
            CHECK(first_success.at(from) < first_success.at(to));
        }
        // alpha increments equal recorded failures times delta
        std::map<std::string, int> fails;
        for (const auto& e : result.trace) {
            if (e.outcome == "failure") ++fails[e.task_id];
        }
        for (const auto& n : dag.nodes()) {
            CHECK(n.complexity_alpha == 1.0 + fails[n.id] * cfg.delta);
        }
    }
}

TEST_CASE("knowledge base round-trips through jsonl") {
    KnowledgeBase kb;
    kb.add({"task one", "artifact1", "ok", true});
    kb.add({"task two", "artifact2", "parse error", false});
    const auto text = kb.to_jsonl();
    const auto back = KnowledgeBase::from_jsonl(text);
    REQUIRE(back.size() == 2);
    CHECK(back.triples()[1].feedback == "parse error");
    CHECK(back.triples()[0].success);
    CHECK_FALSE(back.triples()[1].success);
}

TEST_CASE("trace events serialize one json object per line") {
    std::vector<TraceEvent> trace = {{1, "A", 2, "failure", 1.5}, {2, "B", 1, "success", 1.0}};
    const auto text = trace_to_jsonl(trace);
    CHECK(std::count(text.begin(), text.end(), '\n') == 2);
    const auto first = json::parse(text.substr(0, text.find('\n')));
    CHECK(first.at("task_id") == "A");
    CHECK(first.at("alpha_after") == 1.5);
}
