#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantloop/errors.hpp"
#include "quantloop/jsonutil.hpp"
#include "quantloop/loop.hpp"

// httplib drags in <resolv.h>, whose _res macro breaks headers parsed after
// it; keep it last.
#include <httplib.h>

namespace quantloop {

enum class GatewayMode { live, record, replay };

// Thin client configuration for a chat-completions-style JSON endpoint.
// The auth token is read from the named environment variable, never stored.
struct GatewayConfig {
    std::string endpoint;  // e.g. http://127.0.0.1:8080/v1/chat/completions
    std::string model = "gpt-4o-mini";
    std::string auth_env = "QUANTLOOP_API_TOKEN";
    double temperature = 0.8;
    int max_tokens = 4096;
    double timeout_s = 60.0;
    int retries = 2;
    GatewayMode mode = GatewayMode::live;
    std::string replay_dir;
    std::string prompt_dir;  // optional template overrides

    void validate() const {
        if (!(timeout_s > 0.0)) throw InvalidParameter("timeout must be positive");
        if (retries < 0) throw InvalidParameter("retries must be >= 0");
        if (mode != GatewayMode::live && replay_dir.empty()) {
            throw InvalidParameter("record/replay modes need a replay directory");
        }
        if (mode != GatewayMode::replay && endpoint.empty()) {
            throw InvalidParameter("live/record modes need an endpoint");
        }
    }
};

// Expected shape of the structured reply.
enum class ReplySchema { hypothesis, factor_task, model_task, action_choice };

namespace gateway_detail {

inline std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string prompt_hash(const json& request) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(request.dump())));
    return buf;
}

inline void split_endpoint(const std::string& endpoint, std::string& base, std::string& path) {
    const auto scheme = endpoint.find("://");
    if (scheme == std::string::npos) throw InvalidParameter("endpoint must carry a scheme");
    const auto slash = endpoint.find('/', scheme + 3);
    if (slash == std::string::npos) {
        base = endpoint;
        path = "/";
    } else {
        base = endpoint.substr(0, slash);
        path = endpoint.substr(slash);
    }
}

// Schema checks return an error message, empty when the reply conforms.
inline std::string check_reply(ReplySchema schema, const json& reply) {
    auto need_string = [&](const json& obj, const char* key) -> std::string {
        if (!obj.contains(key) || !obj.at(key).is_string()) {
            return std::string("missing string field '") + key + "'";
        }
        return "";
    };
    switch (schema) {
        case ReplySchema::action_choice: {
            auto err = need_string(reply, "action");
            if (!err.empty()) return err;
            const auto a = reply.at("action").get<std::string>();
            if (a != "factor" && a != "model") return "action must be factor or model";
            return "";
        }
        case ReplySchema::factor_task: {
            auto err = need_string(reply, "factor_name");
            if (err.empty()) err = need_string(reply, "factor_formulation");
            return err;
        }
        case ReplySchema::model_task: {
            if (!reply.contains("model_spec") || !reply.at("model_spec").is_object()) {
                return "missing object field 'model_spec'";
            }
            return "";
        }
        case ReplySchema::hypothesis: {
            auto err = need_string(reply, "action");
            if (err.empty()) err = need_string(reply, "hypothesis");
            if (err.empty()) err = need_string(reply, "reason");
            if (!err.empty()) return err;
            const auto a = reply.at("action").get<std::string>();
            if (a != "factor" && a != "model") return "action must be factor or model";
            if (!reply.contains("tasks") || !reply.at("tasks").is_array() ||
                reply.at("tasks").empty()) {
                return "missing non-empty array field 'tasks'";
            }
            if (a == "factor") {
                if (reply.at("tasks").size() > 5) return "factor hypotheses carry at most 5 tasks";
                for (const auto& t : reply.at("tasks")) {
                    auto terr = need_string(t, "factor_name");
                    if (terr.empty()) terr = need_string(t, "factor_formulation");
                    if (!terr.empty()) return terr;
                }
            } else {
                if (reply.at("tasks").size() != 1) return "model hypotheses carry exactly 1 task";
                if (!reply.at("tasks")[0].contains("model_spec")) {
                    return "model task needs a 'model_spec' object";
                }
            }
            return "";
        }
    }
    return "unknown schema";
}

}  // namespace gateway_detail

// Client for a chat-completions endpoint with strict output validation and a
// prompt-hash-keyed record/replay store for offline tests.
class GatewayClient {
public:
    explicit GatewayClient(GatewayConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const GatewayConfig& config() const { return cfg_; }

    // One structured exchange: send the messages, validate the reply against
    // the schema, allow a single reformat retry, and return the parsed JSON.
    json generate(const json& messages, ReplySchema schema) {
        json request = {{"model", cfg_.model},
                        {"messages", messages},
                        {"temperature", cfg_.temperature},
                        {"max_tokens", cfg_.max_tokens}};
        std::string content = exchange(request);
        json reply = try_parse(content);
        std::string err = reply.is_discarded() ? "reply is not valid JSON"
                                               : gateway_detail::check_reply(schema, reply);
        if (err.empty()) return reply;

        // one reformat pass: restate the constraint and resend
        json retry_messages = messages;
        retry_messages.push_back(
            {{"role", "user"},
             {"content", "The previous reply was rejected: " + err +
                             ". Reply again with exactly one JSON object of the required shape."}});
        json retry_request = request;
        retry_request["messages"] = retry_messages;
        std::string retry_content;
        try {
            retry_content = exchange(retry_request);
        } catch (const GatewayUnavailable&) {
            throw MalformedReply("reply failed schema validation: " + err, content);
        }
        json retry_reply = try_parse(retry_content);
        err = retry_reply.is_discarded() ? "reply is not valid JSON"
                                         : gateway_detail::check_reply(schema, retry_reply);
        if (!err.empty()) {
            throw MalformedReply("reply failed schema validation after retry: " + err,
                                 retry_content);
        }
        return retry_reply;
    }

private:
    static json try_parse(const std::string& text) {
        return json::parse(text, nullptr, false);
    }

    std::string fixture_path(const json& request) const {
        return cfg_.replay_dir + "/" + gateway_detail::prompt_hash(request) + ".json";
    }

    // Returns the assistant message content for a request, via the wire or
    // the replay store.
    std::string exchange(const json& request) {
        if (cfg_.mode == GatewayMode::replay) {
            std::ifstream in(fixture_path(request));
            if (!in) {
                throw GatewayUnavailable("no replay fixture " + fixture_path(request));
            }
            json body;
            in >> body;
            return extract_content(body);
        }
        const json body = post_with_retries(request);
        if (cfg_.mode == GatewayMode::record) {
            std::filesystem::create_directories(cfg_.replay_dir);
            atomic_write_file(fixture_path(request), body.dump(2) + "\n");
        }
        return extract_content(body);
    }

    json post_with_retries(const json& request) {
        std::string base, path;
        gateway_detail::split_endpoint(cfg_.endpoint, base, path);
        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
            httplib::Client client(base);
            client.set_connection_timeout(std::chrono::milliseconds(
                static_cast<int>(cfg_.timeout_s * 1000)));
            client.set_read_timeout(
                std::chrono::milliseconds(static_cast<int>(cfg_.timeout_s * 1000)));
            if (const char* token = std::getenv(cfg_.auth_env.c_str())) {
                client.set_default_headers({{"Authorization", std::string("Bearer ") + token}});
            }
            auto res = client.Post(path, request.dump(), "application/json");
            if (!res) {
                last_error = "transport error " + httplib::to_string(res.error());
                continue;
            }
            if (res->status != 200) {
                last_error = "http status " + std::to_string(res->status);
                continue;
            }
            json body = try_parse(res->body);
            if (body.is_discarded()) {
                last_error = "response body is not JSON";
                continue;
            }
            return body;
        }
        throw GatewayUnavailable("endpoint unreachable after " +
                                 std::to_string(cfg_.retries + 1) + " attempts: " + last_error);
    }

    static std::string extract_content(const json& body) {
        try {
            return body.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const std::exception&) {
            throw MalformedReply("response carries no message content", body.dump());
        }
    }

    GatewayConfig cfg_;
};

namespace gateway_detail {

inline std::string default_template(const std::string& name) {
    if (name == "hypothesis_factor") {
        return "You are a quantitative researcher proposing alpha factors.\n"
               "{{background}}\nFields: {{fields}}\n{{grammar}}\n"
               "Guidelines: propose 1-5 factors, simple first, deepen on success, shift "
               "direction on failure.\n"
               "Reply with one JSON object: {\"action\": \"factor\", \"hypothesis\": str, "
               "\"reason\": str, \"tasks\": [{\"factor_name\": str, \"factor_formulation\": "
               "str}]}.";
    }
    if (name == "hypothesis_model") {
        return "You are a quantitative researcher tuning the scoring model.\n"
               "{{background}}\n{{grammar}}\n"
               "Reply with one JSON object: {\"action\": \"model\", \"hypothesis\": str, "
               "\"reason\": str, \"tasks\": [{\"model_spec\": {\"transform\": \"zscore|none\", "
               "\"ridge_grid\": [..], \"lookback\": int}}]}.";
    }
    if (name == "implement_factor") {
        return "Implement the factor task below as one formula in the operator grammar.\n"
               "{{grammar}}\nTask: {{task}}\nReference solution: {{reference}}\n"
               "Previous feedback: {{feedback}}\n"
               "Reply with one JSON object: {\"factor_name\": str, \"factor_formulation\": str}.";
    }
    if (name == "implement_model") {
        return "Produce the model specification for the task below.\nTask: {{task}}\n"
               "Previous feedback: {{feedback}}\n"
               "Reply with one JSON object: {\"model_spec\": {\"transform\": \"zscore|none\", "
               "\"ridge_grid\": [..], \"lookback\": int}}.";
    }
    return "Decide which direction to optimize next given the history.\n{{history}}\n"
           "Reply with one JSON object: {\"action\": \"factor\"} or {\"action\": \"model\"}.";
}

inline std::string load_template(const std::string& prompt_dir, const std::string& name) {
    if (!prompt_dir.empty()) {
        std::ifstream in(prompt_dir + "/" + name + ".txt");
        if (in) {
            std::stringstream buf;
            buf << in.rdbuf();
            return buf.str();
        }
    }
    return default_template(name);
}

inline std::string fill_template(std::string text,
                                 const std::vector<std::pair<std::string, std::string>>& subs) {
    for (const auto& [key, value] : subs) {
        const std::string needle = "{{" + key + "}}";
        for (auto pos = text.find(needle); pos != std::string::npos;
             pos = text.find(needle, pos + value.size())) {
            text.replace(pos, needle.size(), value);
        }
    }
    return text;
}

inline std::string history_digest(const std::vector<const ExperimentRecord*>& conditioned) {
    std::ostringstream out;
    for (const auto* r : conditioned) {
        out << "Trial " << r->loop_index << " [" << to_string(r->action)
            << "] hypothesis: " << r->hypothesis.statement
            << " | decision: " << (r->feedback.decision ? "true" : "false")
            << " | observations: " << r->feedback.observations << "\n";
    }
    return out.str();
}

inline std::string sanitize_name(const std::string& name) {
    std::string out;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') out.push_back(c);
    }
    if (out.empty()) out = "factor";
    return out;
}

}  // namespace gateway_detail

// Remote-backed hypothesis source speaking the same artifact grammar as the
// template generator. Every formula passes the DSL parser before a task is
// accepted — nothing unparsed travels further.
class GatewayGenerator : public HypothesisGenerator {
public:
    explicit GatewayGenerator(GatewayClient& client) : client_(client) {}

    Hypothesis synthesize(const ScenarioContext& ctx,
                          const std::vector<const ExperimentRecord*>& conditioned,
                          ActionType action, const SotaSets&, int loop_index) override {
        using namespace gateway_detail;
        const auto& cfg = client_.config();
        const std::string tmpl = load_template(
            cfg.prompt_dir,
            action == ActionType::factor ? "hypothesis_factor" : "hypothesis_model");
        std::string fields;
        for (const auto& f : ctx.data_fields) fields += (fields.empty() ? "" : ", ") + f;
        const std::string system = fill_template(tmpl, {{"background", ctx.background},
                                                        {"grammar", ctx.artifact_grammar},
                                                        {"fields", fields}});
        const json messages = {
            {{"role", "system"}, {"content", system}},
            {{"role", "user"},
             {"content", "The former hypotheses and feedback:\n" + history_digest(conditioned) +
                             "\nPropose the next " + to_string(action) + " hypothesis."}}};

        json reply;
        try {
            reply = client_.generate(messages, ReplySchema::hypothesis);
        } catch (const Error& e) {
            throw GenerationFailed(e.what());
        }
        if (action_from_string(reply.at("action").get<std::string>()) != action) {
            throw GenerationFailed("backend proposed the wrong action type");
        }

        Hypothesis h;
        h.id = "h" + std::to_string(loop_index) + "_gw";
        h.action = action;
        h.statement = reply.at("hypothesis").get<std::string>();
        h.rationale = reply.at("reason").get<std::string>();
        if (action == ActionType::factor) {
            for (const auto& t : reply.at("tasks")) {
                const std::string formula = t.at("factor_formulation").get<std::string>();
                try {
                    parse(formula);
                } catch (const Error&) {
                    continue;  // unparsable proposals never leave the gateway
                }
                TaskSpec spec;
                spec.kind = TaskKind::factor;
                spec.id = sanitize_name(t.at("factor_name").get<std::string>()) + "_L" +
                          std::to_string(loop_index);
                spec.description = "factor " + spec.id + ": formula: " + formula;
                h.tasks.push_back(std::move(spec));
            }
            if (h.tasks.empty()) {
                throw GenerationFailed("no parseable factor formulations in the reply");
            }
        } else {
            const auto spec_json = reply.at("tasks")[0].at("model_spec");
            try {
                model_spec_from_json(spec_json);
            } catch (const std::exception& e) {
                throw GenerationFailed(std::string("bad model spec: ") + e.what());
            }
            TaskSpec spec;
            spec.kind = TaskKind::model;
            spec.id = "model_L" + std::to_string(loop_index);
            spec.description = "model task " + spec.id + ": spec: " + spec_json.dump();
            h.tasks.push_back(std::move(spec));
        }
        h.validate();
        return h;
    }

    ActionType suggest_action(const std::vector<ExperimentRecord>& history) override {
        using namespace gateway_detail;
        std::vector<const ExperimentRecord*> refs;
        for (const auto& r : history) refs.push_back(&r);
        const std::string tmpl = load_template(client_.config().prompt_dir, "action_choice");
        const json messages = {{{"role", "user"},
                                {"content", fill_template(tmpl, {{"history", history_digest(refs)}})}}};
        try {
            const json reply = client_.generate(messages, ReplySchema::action_choice);
            return action_from_string(reply.at("action").get<std::string>());
        } catch (const Error&) {
            return HypothesisGenerator::suggest_action(history);
        }
    }

private:
    GatewayClient& client_;
};

// Implementer that asks the remote backend for each artifact, passing the
// knowledge-base reference and the previous attempt's feedback through.
inline Implementer gateway_implementer(GatewayClient& client, const std::string& grammar) {
    return [&client, grammar](const TaskNode& task, const std::optional<KbTriple>& reference,
                              const std::string& feedback, int) -> std::string {
        using namespace gateway_detail;
        const bool is_model = task.kind == TaskKind::model;
        const std::string tmpl = load_template(client.config().prompt_dir,
                                               is_model ? "implement_model" : "implement_factor");
        const std::string prompt =
            fill_template(tmpl, {{"grammar", grammar},
                                 {"task", task.description},
                                 {"reference", reference ? reference->artifact : "none"},
                                 {"feedback", feedback.empty() ? "none" : feedback}});
        const json messages = {{{"role", "user"}, {"content", prompt}}};
        try {
            const json reply = client.generate(
                messages, is_model ? ReplySchema::model_task : ReplySchema::factor_task);
            return is_model ? reply.at("model_spec").dump()
                            : reply.at("factor_formulation").get<std::string>();
        } catch (const GatewayUnavailable& e) {
            throw ImplementerUnavailable(e.what());
        } catch (const MalformedReply& e) {
            // a malformed artifact is a failed attempt, not a transport error
            return std::string("__malformed__ ") + e.raw();
        }
    };
}

}  // namespace quantloop
