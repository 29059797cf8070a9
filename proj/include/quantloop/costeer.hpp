#pragma once

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "quantloop/errors.hpp"
#include "quantloop/jsonutil.hpp"

namespace quantloop {

enum class TaskKind { factor, model };

struct TaskNode {
    std::string id;
    std::string description;
    TaskKind kind = TaskKind::factor;
    double complexity_alpha = 1.0;
    int attempts = 0;
};

struct CoSteerConfig {
    double delta = 0.5;
    double sim_threshold = 0.3;
    int max_inner_iters = 10;
    int max_outer_rounds = 3;

    void validate() const {
        if (!(delta > 0.0)) throw InvalidParameter("delta must be positive");
        if (sim_threshold < 0.0 || sim_threshold > 1.0) {
            throw InvalidParameter("sim_threshold must be in [0, 1]");
        }
        if (max_inner_iters < 1 || max_outer_rounds < 1) {
            throw InvalidParameter("iteration caps must be >= 1");
        }
    }
};

// Dependency DAG over tasks; an edge (from, to) means `from` precedes `to`.
// Acyclicity is verified at construction.
class TaskDag {
public:
    TaskDag(std::vector<TaskNode> nodes, std::vector<std::pair<std::string, std::string>> edges)
        : nodes_(std::move(nodes)), edges_(std::move(edges)) {
        std::set<std::string> ids;
        for (const auto& n : nodes_) {
            if (!ids.insert(n.id).second) throw DuplicateKey("duplicate task id: " + n.id);
        }
        for (const auto& [from, to] : edges_) {
            if (!ids.count(from) || !ids.count(to)) {
                throw InvalidParameter("edge references unknown task: " + from + " -> " + to);
            }
        }
        check_acyclic();
    }

    const std::vector<TaskNode>& nodes() const { return nodes_; }
    std::vector<TaskNode>& nodes() { return nodes_; }
    const std::vector<std::pair<std::string, std::string>>& edges() const { return edges_; }

    TaskNode& node(const std::string& id) {
        for (auto& n : nodes_) {
            if (n.id == id) return n;
        }
        throw InvalidParameter("no such task: " + id);
    }

private:
    void check_acyclic() const {
        std::map<std::string, std::vector<std::string>> adjacency;
        std::map<std::string, int> state;  // 0 unvisited, 1 on stack, 2 done
        for (const auto& n : nodes_) state[n.id] = 0;
        for (const auto& [from, to] : edges_) adjacency[from].push_back(to);

        std::vector<std::string> stack;
        std::function<void(const std::string&)> visit = [&](const std::string& id) {
            state[id] = 1;
            stack.push_back(id);
            for (const auto& next : adjacency[id]) {
                if (state[next] == 1) {
                    // witness: the cycle portion of the stack plus the repeat
                    std::vector<std::string> cycle(
                        std::find(stack.begin(), stack.end(), next), stack.end());
                    cycle.push_back(next);
                    throw CycleDetected(cycle);
                }
                if (state[next] == 0) visit(next);
            }
            stack.pop_back();
            state[id] = 2;
        };
        for (const auto& n : nodes_) {
            if (state[n.id] == 0) visit(n.id);
        }
    }

    std::vector<TaskNode> nodes_;
    std::vector<std::pair<std::string, std::string>> edges_;
};

// Dependency edges come from "builds-on: a, b" markers in task descriptions;
// a task without the marker has no incoming constraint.
inline TaskDag make_task_dag(std::vector<TaskNode> tasks) {
    std::set<std::string> ids;
    for (const auto& t : tasks) ids.insert(t.id);
    std::vector<std::pair<std::string, std::string>> edges;
    for (const auto& t : tasks) {
        const auto pos = t.description.find("builds-on:");
        if (pos == std::string::npos) continue;
        std::string rest = t.description.substr(pos + 10);
        const auto stop = rest.find_first_of(";\n");
        if (stop != std::string::npos) rest = rest.substr(0, stop);
        std::istringstream in(rest);
        std::string ref;
        while (std::getline(in, ref, ',')) {
            const auto first = ref.find_first_not_of(" \t");
            if (first == std::string::npos) continue;
            const auto last = ref.find_last_not_of(" \t");
            ref = ref.substr(first, last - first + 1);
            if (ids.count(ref) && ref != t.id) edges.emplace_back(ref, t.id);
        }
    }
    return TaskDag(std::move(tasks), std::move(edges));
}

struct EdgeWeight {
    std::string from, to;
    double weight;  // alpha_from / alpha_to
};

inline std::vector<EdgeWeight> edge_weights(const TaskDag& dag) {
    std::map<std::string, double> alpha;
    for (const auto& n : dag.nodes()) alpha[n.id] = n.complexity_alpha;
    std::vector<EdgeWeight> out;
    out.reserve(dag.edges().size());
    for (const auto& [from, to] : dag.edges()) {
        out.push_back({from, to, alpha.at(from) / alpha.at(to)});
    }
    return out;
}

// Topological order over the unresolved tasks: at each step the dependency-
// free task with the smallest complexity score runs first, ties by id.
inline std::vector<std::string> update_task_order(const TaskDag& dag,
                                                  const std::set<std::string>& resolved = {}) {
    std::map<std::string, int> indegree;
    std::map<std::string, std::vector<std::string>> adjacency;
    std::map<std::string, double> alpha;
    for (const auto& n : dag.nodes()) {
        if (resolved.count(n.id)) continue;
        indegree[n.id] = 0;
        alpha[n.id] = n.complexity_alpha;
    }
    for (const auto& [from, to] : dag.edges()) {
        if (resolved.count(from) || resolved.count(to)) continue;
        adjacency[from].push_back(to);
        ++indegree[to];
    }

    // (alpha, id) keyed set as a deterministic priority queue
    std::set<std::pair<double, std::string>> free_tasks;
    for (const auto& [id, deg] : indegree) {
        if (deg == 0) free_tasks.insert({alpha[id], id});
    }
    std::vector<std::string> order;
    order.reserve(indegree.size());
    while (!free_tasks.empty()) {
        const auto [a, id] = *free_tasks.begin();
        free_tasks.erase(free_tasks.begin());
        order.push_back(id);
        for (const auto& next : adjacency[id]) {
            if (--indegree[next] == 0) free_tasks.insert({alpha[next], next});
        }
    }
    if (order.size() != indegree.size()) {
        throw CycleDetected({"unreachable: constructor enforces acyclicity"});
    }
    return order;
}

// One knowledge-base record: what was asked, what was produced, how it went.
struct KbTriple {
    std::string task_description;
    std::string artifact;
    std::string feedback;
    bool success = false;
};

class KnowledgeBase {
public:
    void add(KbTriple triple) { triples_.push_back(std::move(triple)); }
    const std::vector<KbTriple>& triples() const { return triples_; }
    std::size_t size() const { return triples_.size(); }

    std::string to_jsonl() const {
        std::string out;
        for (const auto& t : triples_) {
            json j = {{"task", t.task_description},
                      {"artifact", t.artifact},
                      {"feedback", t.feedback},
                      {"success", t.success}};
            out += j.dump() + "\n";
        }
        return out;
    }

    static KnowledgeBase from_jsonl(const std::string& text) {
        KnowledgeBase kb;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            kb.add({j.at("task").get<std::string>(), j.at("artifact").get<std::string>(),
                    j.at("feedback").get<std::string>(), j.at("success").get<bool>()});
        }
        return kb;
    }

private:
    std::vector<KbTriple> triples_;
};

using SimilarityFn = std::function<double(const std::string&, const std::string&)>;

// Token-set Jaccard over lowercased alphanumeric tokens.
inline double token_jaccard(const std::string& a, const std::string& b) {
    auto tokens = [](const std::string& s) {
        std::set<std::string> out;
        std::string cur;
        for (char c : s) {
            if (std::isalnum(static_cast<unsigned char>(c))) {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            } else if (!cur.empty()) {
                out.insert(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) out.insert(cur);
        return out;
    };
    const auto ta = tokens(a);
    const auto tb = tokens(b);
    if (ta.empty() && tb.empty()) return 0.0;
    std::size_t common = 0;
    for (const auto& t : ta) common += tb.count(t);
    return static_cast<double>(common) / static_cast<double>(ta.size() + tb.size() - common);
}

// Best reference triple with similarity strictly above the threshold; ties go
// to the most recent entry.
inline std::optional<KbTriple> kb_retrieve(const KnowledgeBase& kb, const TaskNode& task,
                                           const CoSteerConfig& cfg,
                                           const SimilarityFn& similarity = token_jaccard) {
    cfg.validate();
    std::optional<KbTriple> best;
    double best_sim = cfg.sim_threshold;
    for (const auto& triple : kb.triples()) {
        const double sim = similarity(task.description, triple.task_description);
        if (sim > best_sim || (best && sim == best_sim)) {
            best = triple;
            best_sim = std::max(best_sim, sim);
        }
    }
    return best;
}

// Produces an artifact string for a task; may consult the retrieved
// reference and the previous attempt's feedback. Throws
// ImplementerUnavailable on transport failure.
using Implementer = std::function<std::string(
    const TaskNode&, const std::optional<KbTriple>&, const std::string& prev_feedback,
    int attempt)>;

// Checks an artifact; returns (success, feedback text).
using TaskEvaluator =
    std::function<std::pair<bool, std::string>(const TaskNode&, const std::string&)>;

struct ImplementOutcome {
    bool success = false;
    std::string artifact;
    std::string feedback;
    int attempts = 0;
};

// Generate -> evaluate rounds, feeding feedback and the knowledge-base
// reference into each retry. Every attempt (success or failure) lands in the
// knowledge base.
inline ImplementOutcome implement_task(TaskNode& task, KnowledgeBase& kb,
                                       const Implementer& implementer,
                                       const TaskEvaluator& evaluator, const CoSteerConfig& cfg) {
    cfg.validate();
    ImplementOutcome out;
    std::string prev_feedback;
    for (int attempt = 1; attempt <= cfg.max_inner_iters; ++attempt) {
        const auto reference = kb_retrieve(kb, task, cfg);
        const std::string artifact = implementer(task, reference, prev_feedback, attempt);
        const auto [ok, feedback] = evaluator(task, artifact);
        ++task.attempts;
        kb.add({task.description, artifact, feedback, ok});
        out.attempts = attempt;
        out.artifact = artifact;
        out.feedback = feedback;
        if (ok) {
            out.success = true;
            return out;
        }
        prev_feedback = feedback;
    }
    return out;
}

struct TraceEvent {
    int step = 0;
    std::string task_id;
    int attempt = 0;  // inner attempts consumed by this execution
    std::string outcome;
    double alpha_after = 1.0;
};

inline std::string trace_to_jsonl(const std::vector<TraceEvent>& trace) {
    std::string out;
    for (const auto& e : trace) {
        json j = {{"step", e.step},
                  {"task_id", e.task_id},
                  {"attempt", e.attempt},
                  {"outcome", e.outcome},
                  {"alpha_after", e.alpha_after}};
        out += j.dump() + "\n";
    }
    return out;
}

struct CoSteerRunResult {
    std::map<std::string, ImplementOutcome> outcomes;
    std::vector<TraceEvent> trace;
};

// The outer scheduling loop: execute in complexity-ordered topological order;
// a task failure bumps its complexity, breaks the pass, and forces a
// reorder. A task is abandoned after max_outer_rounds failed executions.
inline CoSteerRunResult run_costeer(TaskDag& dag, const Implementer& implementer,
                                    const TaskEvaluator& evaluator, const CoSteerConfig& cfg,
                                    KnowledgeBase& kb) {
    cfg.validate();
    CoSteerRunResult result;
    std::set<std::string> finished;  // resolved or abandoned
    std::map<std::string, int> failures;
    int step = 0;

    while (finished.size() < dag.nodes().size()) {
        const auto order = update_task_order(dag, finished);
        bool broke = false;
        for (const auto& id : order) {
            TaskNode& task = dag.node(id);
            auto outcome = implement_task(task, kb, implementer, evaluator, cfg);
            ++step;
            if (outcome.success) {
                result.trace.push_back({step, id, outcome.attempts, "success",
                                        task.complexity_alpha});
                result.outcomes[id] = std::move(outcome);
                finished.insert(id);
                continue;
            }
            task.complexity_alpha += cfg.delta;
            result.trace.push_back({step, id, outcome.attempts, "failure",
                                    task.complexity_alpha});
            if (++failures[id] >= cfg.max_outer_rounds) {
                result.outcomes[id] = std::move(outcome);
                finished.insert(id);
            }
            broke = true;
            break;
        }
        if (!broke && order.empty()) break;
    }
    return result;
}

}  // namespace quantloop
