#pragma once

// Synthetic in-context tasks with rule-checkable ground truth.
//
// token-mapping     every input word has a fixed hidden class (set by
//                   rule_seed); each episode draws a fresh bijection from
//                   classes to label words, so the mapping has to be read off
//                   the demonstrations. An input is 0..max_prefix random
//                   filler words followed by the key word whose class counts.
// parity-of-class   inputs are input_length words; the class is the sum of the
//                   word classes mod n_classes, then mapped as above.
// key-value-recall  each episode draws a fresh key -> label table; the query
//                   key is one of the demonstrated keys.
//
// Training streams can start from the identity class -> label map (anchor
// rate), which lets a model pick up the hidden classes as a prior before it
// learns to read the map from context. Evaluation sets always draw the map at
// random, and with mirroring every label rotation appears equally often.
//
// Label noise replaces a demonstration label with a different label with the
// given probability; inputs are split into a "clear" and a "vague" group with
// separate noise rates. Queries are never noisy.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "bicl/prompt.hpp"
#include "bicl/tokenizer.hpp"

namespace bicl {

enum class TaskKind { TokenMapping, ParityOfClass, KeyValueRecall };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct TaskSpec {
    TaskKind kind = TaskKind::TokenMapping;
    std::size_t n_inputs = 24;      // size of the input word slice
    std::size_t n_classes = 2;
    std::size_t input_length = 1;   // words per input (parity-of-class)
    std::size_t max_prefix = 0;     // token-mapping: up to this many filler words before the key word
    std::size_t n_demos = 4;
    double vague_fraction = 0.0;    // share of input words in the vague group
    double clear_noise = 0.0;
    double vague_noise = 0.0;
    double drift = 0.0;             // training streams: chance the label bijection is redrawn before each demo
    double anchor_rate = 0.0;       // training streams: chance a stream starts from the identity bijection
    bool mirror = true;             // emit every label rotation of each episode
    std::uint64_t rule_seed = 0;
    PromptTemplate tmpl;

    // Throws ConfigError on inconsistent fields.
    void validate() const;

    std::vector<std::string> input_words() const;
    std::vector<std::string> label_words() const;

    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

// Tokenizer covering the newline, the template's literal words, every input
// word and every label word of the task.
Tokenizer toy_tokenizer(const TaskSpec& spec);

// Hidden rule: class of an input word, and whether it belongs to the vague group.
std::size_t word_class(const TaskSpec& spec, std::size_t word_index);
bool word_is_vague(const TaskSpec& spec, std::size_t word_index);

// Ground-truth class of a rendered input (one or more words).
std::size_t input_class(const TaskSpec& spec, const std::string& input);

struct DatasetSplits {
    std::vector<PromptSet> train;
    std::vector<PromptSet> validation;
    std::vector<PromptSet> test;
};

// `size` prompt sets reproducible from seed. With mirror on, size is rounded
// up to a multiple of n_classes; gold labels are exactly balanced.
std::vector<PromptSet> generate_dataset(const TaskSpec& spec, const Tokenizer& tok, std::uint64_t seed,
                                        std::size_t size);

// Disjoint splits (no two prompt sets share demos and query).
DatasetSplits generate_splits(const TaskSpec& spec, const Tokenizer& tok, std::uint64_t seed, std::size_t n_train,
                              std::size_t n_validation, std::size_t n_test);

// One training stream: demonstrations concatenated up to max_tokens, with the
// positions whose next token is a demonstration label.
struct TrainingSequence {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> label_positions;
};

TrainingSequence sample_training_sequence(const TaskSpec& spec, const Tokenizer& tok, std::mt19937_64& rng,
                                          std::size_t max_tokens);

// ---------------------------------------------------------------------------
// Dataset files: line-delimited JSON. First line is a header
//   {"format":"bicl-dataset","version":1,"task":{...}}
// followed by one record per line
//   {"split":"test","demos":[["w03","A"],...],"query":"w11","gold":"B"}

struct DatasetFile {
    TaskSpec spec;
    DatasetSplits splits;
};

void write_dataset(const std::filesystem::path& path, const TaskSpec& spec, const DatasetSplits& splits);
DatasetFile read_dataset(const std::filesystem::path& path, const Tokenizer& tok);

// JSON form of a task spec, as stored in dataset headers.
std::string task_spec_to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const std::string& json);

}  // namespace bicl
