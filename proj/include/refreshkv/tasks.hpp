#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace refreshkv {

// Lowercase English words compiled in from data/words.txt.
std::span<const char* const> bundled_words();

// Words of a key are joined by '-'.
std::string_view first_word(std::string_view key);
std::string_view last_word(std::string_view key);

struct ChainKeyInstance {
    std::vector<std::string> keys;  // prompt order
    std::map<std::string, std::string> successor_map;
    std::string prompt;
    std::size_t T = 0;  // target chain length
    std::size_t W = 0;  // words per key
    std::uint64_t seed = 0;

    bool contains(std::string_view key) const;
};

// n_keys keys of W words built on one cycle of distinct link words, so every
// key has exactly one successor and one predecessor; prompt order is a seeded
// shuffle. Throws ConfigError when W < 2, n_keys < max(T, 2), T == 0 or the
// word list is too small.
ChainKeyInstance generate_chain_instance(std::size_t n_keys, std::size_t W, std::size_t T, std::uint64_t seed);

// Instance over an explicit key list (kept in the given order). Successors
// are filled in where exactly one key starts with a key's last word.
ChainKeyInstance chain_instance_from_keys(std::vector<std::string> keys, std::size_t T);

// Instruction header, "Name of key: ..." context lines and the closing
// instruction, for a chain of T keys.
std::string chain_prompt(std::span<const std::string> keys, std::size_t T);

// "ten", "forty-two", ...; numbers from 1000 up are written in digits.
std::string number_to_words(std::size_t n);

struct ChainScore {
    std::size_t valid_prefix_length = 0;
    double score = 0.0;
};

// Output is split on commas and whitespace-trimmed. The valid prefix is the
// longest run of keys that exist in the context and, from the second key on,
// start with the previous key's last word; it is capped at T.
ChainScore evaluate_chain(const ChainKeyInstance& instance, std::string_view output_text);

nlohmann::json to_json(const ChainKeyInstance& instance);
ChainKeyInstance chain_instance_from_json(const nlohmann::json& j);

// Instance files are JSON-lines: to_json(instance) plus "instance_id".
// Output files hold {"instance_id", "output_text"} lines; scoring yields
// {"instance_id", "score", "valid_prefix_length"} lines. Malformed lines and
// unknown ids raise ConfigError.
struct IdentifiedInstance {
    nlohmann::json instance_id;
    ChainKeyInstance instance;
};
void write_instances_jsonl(std::span<const IdentifiedInstance> instances, std::ostream& out);
std::vector<IdentifiedInstance> read_instances_jsonl(std::istream& in);
std::vector<nlohmann::json> score_outputs_jsonl(std::span<const IdentifiedInstance> instances, std::istream& outputs);

// Test double: emits the gold chain starting at start_key, one key per call.
class ScriptedOracle {
public:
    ScriptedOracle(const ChainKeyInstance& instance, std::string start_key);
    ScriptedOracle(const ChainKeyInstance& instance, std::string start_key, std::size_t n_keys);

    std::optional<std::string> next();
    // Remaining keys joined by ", ".
    std::string emit_all();

private:
    const ChainKeyInstance& instance_;
    std::string current_;
    std::size_t remaining_;
};

enum class StreamStructure { uniform, repeated_motif };

std::string_view to_string(StreamStructure s);
StreamStructure stream_structure_from_string(std::string_view name);

struct StreamOptions {
    StreamStructure structure = StreamStructure::repeated_motif;
    std::size_t motif_period = 64;
    double noise = 0.05;  // chance a motif token is replaced by a random one

    bool operator==(const StreamOptions&) const = default;
};

std::vector<int> synthetic_lm_stream(std::size_t length, std::size_t vocab, std::uint64_t seed,
                                     const StreamOptions& options);

// Byte-level tokenizer used for the chain-of-key prompt.
std::vector<int> encode_bytes(std::string_view text);
std::string decode_bytes(std::span<const int> tokens);

}  // namespace refreshkv
