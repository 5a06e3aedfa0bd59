#include "bicl/prompt.hpp"

#include <stdexcept>

#include "bicl/errors.hpp"

namespace bicl {

namespace {

std::string substitute(std::string pattern, const std::string& slot, const std::string& value) {
    for (std::size_t pos = pattern.find(slot); pos != std::string::npos; pos = pattern.find(slot, pos + value.size())) {
        pattern.replace(pos, slot.size(), value);
    }
    return pattern;
}

}  // namespace

std::size_t PromptSet::gold_index() const {
    if (!gold) throw std::logic_error("prompt set has no gold label");
    for (std::size_t i = 0; i < verbalizers.size(); ++i)
        if (verbalizers[i].label == *gold) return i;
    throw std::logic_error("gold label '" + *gold + "' is not a verbalizer");
}

std::string render_demo(const PromptTemplate& tmpl, const Demo& demo) {
    return substitute(substitute(tmpl.demo_pattern, "{input}", demo.input), "{label}", demo.label) + tmpl.separator;
}

std::string render_query(const PromptTemplate& tmpl, const std::string& query) {
    return substitute(tmpl.query_pattern, "{input}", query);
}

std::string render_text(const PromptTemplate& tmpl, std::span<const Demo> demos, const std::string& query,
                        ShotLayout layout) {
    std::string text;
    switch (layout.kind) {
        case ShotLayout::Kind::NShot:
            for (const Demo& d : demos) text += render_demo(tmpl, d);
            break;
        case ShotLayout::Kind::OneShot:
            if (layout.index >= demos.size()) {
                throw std::out_of_range("one-shot layout index " + std::to_string(layout.index) +
                                        " with " + std::to_string(demos.size()) + " demos");
            }
            text += render_demo(tmpl, demos[layout.index]);
            break;
        case ShotLayout::Kind::ZeroShot:
            break;
    }
    return text + render_query(tmpl, query);
}

std::vector<TokenId> render_prompt(const Tokenizer& tok, const PromptTemplate& tmpl, std::span<const Demo> demos,
                                   const std::string& query, ShotLayout layout, std::size_t max_positions) {
    std::vector<TokenId> ids = tok.encode(render_text(tmpl, demos, query, layout));
    if (ids.size() > max_positions) {
        throw ContextOverflowError("rendered prompt has " + std::to_string(ids.size()) +
                                       " tokens, context holds " + std::to_string(max_positions),
                                   ids.size(), max_positions);
    }
    return ids;
}

std::vector<TokenId> render_prompt(const Tokenizer& tok, const PromptSet& prompts, ShotLayout layout,
                                   std::size_t max_positions) {
    return render_prompt(tok, prompts.tmpl, prompts.demos, prompts.query, layout, max_positions);
}

std::uint64_t demo_key(const PromptTemplate& tmpl, const Demo& demo) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : render_demo(tmpl, demo)) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::vector<Verbalizer> make_verbalizers(const Tokenizer& tok, std::span<const std::string> labels) {
    std::vector<Verbalizer> out;
    out.reserve(labels.size());
    for (const std::string& l : labels) {
        const TokenId id = tok.id(l);
        for (const Verbalizer& v : out)
            if (v.token == id) throw std::invalid_argument("verbalizer label '" + l + "' listed twice");
        out.push_back({l, id});
    }
    return out;
}

}  // namespace bicl
