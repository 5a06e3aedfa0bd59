#include "bicl/tokenizer.hpp"

#include <stdexcept>

namespace bicl {

Tokenizer::Tokenizer(std::vector<std::string> table) : table_(std::move(table)) {
    for (std::size_t i = 0; i < table_.size(); ++i) {
        // First occurrence wins; converted BPE tables may repeat byte strings.
        index_.emplace(table_[i], static_cast<TokenId>(i));
    }
}

bool Tokenizer::contains(std::string_view token) const {
    return index_.find(std::string(token)) != index_.end();
}

TokenId Tokenizer::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) {
        throw std::out_of_range("token not in vocabulary: '" + std::string(token) + "'");
    }
    return it->second;
}

const std::string& Tokenizer::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= table_.size()) {
        throw std::out_of_range("token id out of range: " + std::to_string(id));
    }
    return table_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        const char c = text[i];
        if (c == ' ') {
            ++i;
        } else if (c == '\n') {
            ids.push_back(id(kNewline));
            ++i;
        } else {
            std::size_t j = i;
            while (j < text.size() && text[j] != ' ' && text[j] != '\n') ++j;
            ids.push_back(id(text.substr(i, j - i)));
            i = j;
        }
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    bool line_start = true;
    for (TokenId t : ids) {
        const std::string& s = token(t);
        if (s == kNewline) {
            out += '\n';
            line_start = true;
            continue;
        }
        if (!line_start) out += ' ';
        out += s;
        line_start = false;
    }
    return out;
}

}  // namespace bicl
