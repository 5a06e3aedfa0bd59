#include "bicl/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "bicl/errors.hpp"

namespace bicl {

using nlohmann::json;

namespace {

// Own sampling helpers: std distributions are implementation-defined, and the
// golden fixtures must not depend on the standard library in use.
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

bool bernoulli(std::mt19937_64& rng, double p) {
    if (p <= 0.0) return false;
    const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
    return u < p;
}

std::vector<std::size_t> random_permutation(std::mt19937_64& rng, std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
    return p;
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

std::string two_digit(std::size_t i) {
    std::string s = std::to_string(i);
    return s.size() < 2 ? "0" + s : s;
}

std::vector<std::size_t> rule_permutation(const TaskSpec& spec) {
    std::mt19937_64 rng(spec.rule_seed ^ 0x5eedull);
    return random_permutation(rng, spec.n_inputs);
}

struct Episode {
    std::vector<std::size_t> bijection;  // class -> label index
};

class Generator {
public:
    Generator(const TaskSpec& spec, const Tokenizer& tok) : spec_(spec), tok_(tok) {
        spec_.validate();
        const auto perm = rule_permutation(spec_);
        const std::size_t rounds = spec_.n_inputs / spec_.n_classes;
        const auto vague_rounds = static_cast<std::size_t>(spec_.vague_fraction * static_cast<double>(rounds) + 0.5);
        classes_.resize(spec_.n_inputs);
        vague_.resize(spec_.n_inputs);
        for (std::size_t w = 0; w < spec_.n_inputs; ++w) {
            classes_[w] = perm[w] % spec_.n_classes;
            vague_[w] = (perm[w] / spec_.n_classes) < vague_rounds;
        }
        inputs_ = spec_.input_words();
        labels_ = spec_.label_words();
        verbalizers_ = make_verbalizers(tok_, labels_);
    }

    std::size_t cls(std::size_t w) const { return classes_[w]; }
    bool vague(std::size_t w) const { return vague_[w]; }

    std::vector<std::size_t> sample_words(std::mt19937_64& rng) const {
        std::size_t count = spec_.input_length;
        if (spec_.kind == TaskKind::TokenMapping) count = 1 + uniform_index(rng, spec_.max_prefix + 1);
        std::vector<std::size_t> words(count);
        for (auto& w : words) w = uniform_index(rng, spec_.n_inputs);
        return words;
    }

    // Token-mapping inputs are keyed by their last word; parity inputs by all words.
    std::size_t class_of(const std::vector<std::size_t>& words) const {
        if (spec_.kind == TaskKind::TokenMapping) return classes_[words.back()];
        std::size_t c = 0;
        for (std::size_t w : words) c += classes_[w];
        return c % spec_.n_classes;
    }

    bool any_vague(const std::vector<std::size_t>& words) const {
        if (spec_.kind == TaskKind::TokenMapping) return vague_[words.back()];
        return std::any_of(words.begin(), words.end(), [&](std::size_t w) { return vague_[w]; });
    }

    std::string text(const std::vector<std::size_t>& words) const {
        std::string s;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) s += ' ';
            s += inputs_[words[i]];
        }
        return s;
    }

    std::size_t noisy(std::mt19937_64& rng, std::size_t label, bool is_vague) const {
        const double p = is_vague ? spec_.vague_noise : spec_.clear_noise;
        if (spec_.n_classes < 2 || !bernoulli(rng, p)) return label;
        return (label + 1 + uniform_index(rng, spec_.n_classes - 1)) % spec_.n_classes;
    }

    std::vector<std::size_t> redraw(std::mt19937_64& rng, const std::vector<std::size_t>& old) const {
        if (spec_.n_classes < 2) return old;
        for (;;) {
            auto b = random_permutation(rng, spec_.n_classes);
            if (b != old) return b;
        }
    }

    // One episode with the given gold label index, as label indices.
    struct RawEpisode {
        std::vector<std::pair<std::string, std::size_t>> demos;
        std::string query;
        std::size_t gold = 0;
    };

    RawEpisode episode(std::mt19937_64& rng, std::size_t gold) const {
        RawEpisode ep;
        ep.gold = gold;
        if (spec_.kind == TaskKind::KeyValueRecall) {
            std::vector<std::size_t> keys = random_permutation(rng, spec_.n_inputs);
            keys.resize(spec_.n_demos);
            std::vector<std::size_t> values(spec_.n_demos);
            for (auto& v : values) v = uniform_index(rng, spec_.n_classes);
            if (std::find(values.begin(), values.end(), gold) == values.end()) {
                values[uniform_index(rng, values.size())] = gold;
            }
            std::vector<std::size_t> candidates;
            for (std::size_t i = 0; i < values.size(); ++i)
                if (values[i] == gold) candidates.push_back(i);
            for (std::size_t i = 0; i < keys.size(); ++i) ep.demos.emplace_back(inputs_[keys[i]], values[i]);
            ep.query = inputs_[keys[candidates[uniform_index(rng, candidates.size())]]];
            return ep;
        }
        const auto bij = random_permutation(rng, spec_.n_classes);
        for (std::size_t i = 0; i < spec_.n_demos; ++i) {
            const auto words = sample_words(rng);
            ep.demos.emplace_back(text(words), noisy(rng, bij[class_of(words)], any_vague(words)));
        }
        for (;;) {
            const auto words = sample_words(rng);
            if (bij[class_of(words)] == gold) {
                ep.query = text(words);
                break;
            }
        }
        return ep;
    }

    PromptSet to_prompt_set(const RawEpisode& ep, std::size_t rotation) const {
        PromptSet ps;
        ps.tmpl = spec_.tmpl;
        ps.verbalizers = verbalizers_;
        for (const auto& [input, label] : ep.demos)
            ps.demos.push_back({input, labels_[(label + rotation) % spec_.n_classes]});
        ps.query = ep.query;
        ps.gold = labels_[(ep.gold + rotation) % spec_.n_classes];
        return ps;
    }

    const TaskSpec& spec() const { return spec_; }
    const std::vector<std::string>& labels() const { return labels_; }

private:
    TaskSpec spec_;
    const Tokenizer& tok_;
    std::vector<std::size_t> classes_;
    std::vector<bool> vague_;
    std::vector<std::string> inputs_;
    std::vector<std::string> labels_;
    std::vector<Verbalizer> verbalizers_;
};

// Content key used for split disjointness.
std::string content_key(const PromptSet& ps) { return render_text(ps.tmpl, ps.demos, ps.query, ShotLayout::n_shot()); }

std::vector<PromptSet> generate_stream(const TaskSpec& spec, const Tokenizer& tok, std::uint64_t seed,
                                       std::size_t size) {
    Generator gen(spec, tok);
    std::mt19937_64 rng(seed);
    std::vector<PromptSet> out;
    std::set<std::string> seen;
    std::size_t counter = 0;
    std::size_t attempts = 0;
    const std::size_t group = spec.mirror ? spec.n_classes : 1;
    while (out.size() < size) {
        if (++attempts > 100 * (size + 10)) {
            throw ConfigError("task too small to generate " + std::to_string(size) + " distinct prompt sets");
        }
        const auto raw = gen.episode(rng, counter % spec.n_classes);
        std::vector<PromptSet> members;
        bool fresh = true;
        for (std::size_t r = 0; r < group; ++r) {
            members.push_back(gen.to_prompt_set(raw, r));
            if (seen.count(content_key(members.back()))) fresh = false;
        }
        if (!fresh) continue;
        ++counter;
        for (auto& m : members) {
            seen.insert(content_key(m));
            out.push_back(std::move(m));
        }
    }
    return out;
}

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

}  // namespace

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::TokenMapping: return "token-mapping";
        case TaskKind::ParityOfClass: return "parity-of-class";
        case TaskKind::KeyValueRecall: return "key-value-recall";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "token-mapping") return TaskKind::TokenMapping;
    if (s == "parity-of-class") return TaskKind::ParityOfClass;
    if (s == "key-value-recall") return TaskKind::KeyValueRecall;
    throw ConfigError("unknown task kind '" + s + "'");
}

void TaskSpec::validate() const {
    if (n_classes < 2 || n_classes > 26) throw ConfigError("task: n_classes must be in [2, 26]");
    if (n_inputs < n_classes || n_inputs > 100) throw ConfigError("task: n_inputs must be in [n_classes, 100]");
    if (n_inputs % n_classes != 0) throw ConfigError("task: n_inputs must be a multiple of n_classes");
    if (input_length == 0) throw ConfigError("task: input_length must be positive");
    if (kind == TaskKind::TokenMapping && input_length != 1)
        throw ConfigError("task: token-mapping inputs are one key word (plus max_prefix filler words)");
    if (max_prefix > 8) throw ConfigError("task: max_prefix must be at most 8");
    if (kind != TaskKind::TokenMapping && max_prefix != 0)
        throw ConfigError("task: max_prefix applies to token-mapping only");
    if (kind == TaskKind::KeyValueRecall && (input_length != 1 || n_demos == 0 || n_demos > n_inputs))
        throw ConfigError("task: key-value-recall needs single-word keys and 1 <= n_demos <= n_inputs");
    for (double p : {vague_fraction, clear_noise, vague_noise, drift, anchor_rate})
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("task: probabilities must be in [0, 1]");
    if (tmpl.demo_pattern.find("{input}") == std::string::npos ||
        tmpl.demo_pattern.find("{label}") == std::string::npos ||
        tmpl.query_pattern.find("{input}") == std::string::npos) {
        throw ConfigError("task: template patterns need {input} and {label} slots");
    }
    if (tmpl.demo_pattern.find("{label}") == 0) throw ConfigError("task: label cannot open the demo pattern");
}

std::vector<std::string> TaskSpec::input_words() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n_inputs; ++i) out.push_back("w" + two_digit(i));
    return out;
}

std::vector<std::string> TaskSpec::label_words() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n_classes; ++i) out.emplace_back(1, static_cast<char>('A' + i));
    return out;
}

Tokenizer toy_tokenizer(const TaskSpec& spec) {
    spec.validate();
    std::vector<std::string> table{std::string(Tokenizer::kNewline)};
    auto add = [&](const std::string& w) {
        if (std::find(table.begin(), table.end(), w) == table.end()) table.push_back(w);
    };
    for (const std::string& pattern : {spec.tmpl.demo_pattern, spec.tmpl.query_pattern, spec.tmpl.separator}) {
        for (const std::string& w : split_words(pattern)) {
            if (w != "{input}" && w != "{label}") add(w);
        }
    }
    for (const auto& w : spec.input_words()) add(w);
    for (const auto& w : spec.label_words()) add(w);
    return Tokenizer(std::move(table));
}

std::size_t word_class(const TaskSpec& spec, std::size_t word_index) {
    return rule_permutation(spec).at(word_index) % spec.n_classes;
}

bool word_is_vague(const TaskSpec& spec, std::size_t word_index) {
    const std::size_t rounds = spec.n_inputs / spec.n_classes;
    const auto vague_rounds = static_cast<std::size_t>(spec.vague_fraction * static_cast<double>(rounds) + 0.5);
    return rule_permutation(spec).at(word_index) / spec.n_classes < vague_rounds;
}

std::size_t input_class(const TaskSpec& spec, const std::string& input) {
    if (spec.kind == TaskKind::KeyValueRecall) throw ConfigError("key-value-recall inputs have no intrinsic class");
    const auto perm = rule_permutation(spec);
    const auto words = spec.input_words();
    const auto parts = split_words(input);
    if (parts.empty()) throw ConfigError("empty input");
    std::size_t c = 0;
    for (const std::string& w : parts) {
        auto it = std::find(words.begin(), words.end(), w);
        if (it == words.end()) throw ConfigError("unknown input word '" + w + "'");
        const std::size_t wc = perm[static_cast<std::size_t>(it - words.begin())] % spec.n_classes;
        c = spec.kind == TaskKind::TokenMapping ? wc : c + wc;
    }
    return c % spec.n_classes;
}

std::vector<PromptSet> generate_dataset(const TaskSpec& spec, const Tokenizer& tok, std::uint64_t seed,
                                        std::size_t size) {
    if (size == 0) throw ConfigError("generate_dataset: size must be at least 1");
    const std::size_t group = spec.mirror ? spec.n_classes : 1;
    return generate_stream(spec, tok, seed, round_up(size, group));
}

DatasetSplits generate_splits(const TaskSpec& spec, const Tokenizer& tok, std::uint64_t seed, std::size_t n_train,
                              std::size_t n_validation, std::size_t n_test) {
    const std::size_t group = spec.mirror ? spec.n_classes : 1;
    n_train = round_up(n_train, group);
    n_validation = round_up(n_validation, group);
    n_test = round_up(n_test, group);
    auto all = generate_stream(spec, tok, seed, n_train + n_validation + n_test);
    DatasetSplits s;
    auto it = std::make_move_iterator(all.begin());
    s.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
    it += static_cast<std::ptrdiff_t>(n_train);
    s.validation.assign(it, it + static_cast<std::ptrdiff_t>(n_validation));
    it += static_cast<std::ptrdiff_t>(n_validation);
    s.test.assign(it, it + static_cast<std::ptrdiff_t>(n_test));
    return s;
}

TrainingSequence sample_training_sequence(const TaskSpec& spec, const Tokenizer& tok, std::mt19937_64& rng,
                                          std::size_t max_tokens) {
    Generator gen(spec, tok);
    const auto labels = spec.label_words();
    std::vector<TokenId> label_ids;
    for (const auto& l : labels) label_ids.push_back(tok.id(l));

    TrainingSequence seq;
    auto bij = random_permutation(rng, spec.n_classes);
    if (spec.kind != TaskKind::KeyValueRecall && bernoulli(rng, spec.anchor_rate))
        std::iota(bij.begin(), bij.end(), std::size_t{0});
    // Key-value episodes draw keys from a small pool so that keys repeat.
    std::vector<std::size_t> pool;
    std::vector<std::size_t> table(spec.n_inputs);
    if (spec.kind == TaskKind::KeyValueRecall) {
        pool = random_permutation(rng, spec.n_inputs);
        pool.resize(std::max<std::size_t>(2, spec.n_demos));
        for (auto& v : table) v = uniform_index(rng, spec.n_classes);
    }
    for (std::size_t i = 0;; ++i) {
        std::string input;
        std::size_t label = 0;
        if (spec.kind == TaskKind::KeyValueRecall) {
            const std::size_t key = pool[uniform_index(rng, pool.size())];
            input = spec.input_words()[key];
            label = table[key];
        } else {
            if (i > 0 && bernoulli(rng, spec.drift)) bij = gen.redraw(rng, bij);
            const auto words = gen.sample_words(rng);
            input = gen.text(words);
            label = gen.noisy(rng, bij[gen.class_of(words)], gen.any_vague(words));
        }
        const std::vector<TokenId> seg = tok.encode(render_demo(spec.tmpl, Demo{input, labels[label]}));
        if (seq.tokens.size() + seg.size() > max_tokens) break;
        const auto at = std::find(seg.begin(), seg.end(), label_ids[label]);
        seq.label_positions.push_back(seq.tokens.size() + static_cast<std::size_t>(at - seg.begin()) - 1);
        seq.tokens.insert(seq.tokens.end(), seg.begin(), seg.end());
    }
    return seq;
}

// ---------------------------------------------------------------------------

namespace {

json spec_json(const TaskSpec& s) {
    return json{{"kind", to_string(s.kind)},
                {"n_inputs", s.n_inputs},
                {"n_classes", s.n_classes},
                {"input_length", s.input_length},
                {"max_prefix", s.max_prefix},
                {"n_demos", s.n_demos},
                {"vague_fraction", s.vague_fraction},
                {"clear_noise", s.clear_noise},
                {"vague_noise", s.vague_noise},
                {"drift", s.drift},
                {"anchor_rate", s.anchor_rate},
                {"mirror", s.mirror},
                {"rule_seed", s.rule_seed},
                {"template",
                 {{"demo", s.tmpl.demo_pattern}, {"query", s.tmpl.query_pattern}, {"separator", s.tmpl.separator}}}};
}

TaskSpec spec_from(const json& j) {
    TaskSpec s;
    s.kind = task_kind_from_string(j.at("kind").get<std::string>());
    s.n_inputs = j.value("n_inputs", s.n_inputs);
    s.n_classes = j.value("n_classes", s.n_classes);
    s.input_length = j.value("input_length", s.input_length);
    s.max_prefix = j.value("max_prefix", s.max_prefix);
    s.n_demos = j.value("n_demos", s.n_demos);
    s.vague_fraction = j.value("vague_fraction", s.vague_fraction);
    s.clear_noise = j.value("clear_noise", s.clear_noise);
    s.vague_noise = j.value("vague_noise", s.vague_noise);
    s.drift = j.value("drift", s.drift);
    s.anchor_rate = j.value("anchor_rate", s.anchor_rate);
    s.mirror = j.value("mirror", s.mirror);
    s.rule_seed = j.value("rule_seed", s.rule_seed);
    if (j.contains("template")) {
        const json& t = j.at("template");
        s.tmpl.demo_pattern = t.value("demo", s.tmpl.demo_pattern);
        s.tmpl.query_pattern = t.value("query", s.tmpl.query_pattern);
        s.tmpl.separator = t.value("separator", s.tmpl.separator);
    }
    s.validate();
    return s;
}

}  // namespace

std::string task_spec_to_json(const TaskSpec& spec) { return spec_json(spec).dump(); }

TaskSpec task_spec_from_json(const std::string& text) {
    try {
        return spec_from(json::parse(text));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("task spec: ") + e.what());
    }
}

void write_dataset(const std::filesystem::path& path, const TaskSpec& spec, const DatasetSplits& splits) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << json{{"format", "bicl-dataset"}, {"version", 1}, {"task", spec_json(spec)}}.dump() << '\n';
    auto emit = [&](const char* split, const std::vector<PromptSet>& sets) {
        for (const PromptSet& ps : sets) {
            json demos = json::array();
            for (const Demo& d : ps.demos) demos.push_back({d.input, d.label});
            json rec{{"split", split}, {"demos", demos}, {"query", ps.query}};
            if (ps.gold) rec["gold"] = *ps.gold;
            out << rec.dump() << '\n';
        }
    };
    emit("train", splits.train);
    emit("validation", splits.validation);
    emit("test", splits.test);
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

DatasetFile read_dataset(const std::filesystem::path& path, const Tokenizer& tok) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
    DatasetFile file;
    std::string line;
    std::size_t lineno = 0;
    try {
        if (!std::getline(in, line)) throw ConfigError("dataset file is empty");
        ++lineno;
        const json header = json::parse(line);
        if (header.value("format", "") != "bicl-dataset" || header.value("version", 0) != 1) {
            throw ConfigError("dataset header must be {\"format\":\"bicl-dataset\",\"version\":1,...}");
        }
        file.spec = spec_from(header.at("task"));
        const auto verbalizers = make_verbalizers(tok, file.spec.label_words());
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            const json rec = json::parse(line);
            PromptSet ps;
            ps.tmpl = file.spec.tmpl;
            ps.verbalizers = verbalizers;
            for (const auto& d : rec.at("demos")) ps.demos.push_back({d.at(0).get<std::string>(), d.at(1).get<std::string>()});
            ps.query = rec.at("query").get<std::string>();
            if (rec.contains("gold")) ps.gold = rec.at("gold").get<std::string>();
            const std::string split = rec.value("split", "test");
            if (split == "train") file.splits.train.push_back(std::move(ps));
            else if (split == "validation") file.splits.validation.push_back(std::move(ps));
            else if (split == "test") file.splits.test.push_back(std::move(ps));
            else throw ConfigError("unknown split '" + split + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    return file;
}

}  // namespace bicl
