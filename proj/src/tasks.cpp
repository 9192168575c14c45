#include "refreshkv/tasks.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "refreshkv/errors.hpp"

namespace refreshkv {

namespace {

constexpr std::string_view kExampleChain =
    "waggish-fishery, fishery-mosquito, mosquito-perfume, perfume-panda, panda-juice, juice-willow, "
    "willow-bronco, bronco-creditor, creditor-bathhouse, bathhouse-woman";

constexpr std::string_view kInstructionLead =
    "You are given many keys composed of a few words. Your task is to generate a chain of ";
constexpr std::string_view kInstructionRule =
    " keys such that the first word of the current key is the last word of the previous key. Separate the keys "
    "with comma.";

std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

std::vector<std::string> example_words() {
    std::vector<std::string> out;
    std::string_view rest = kExampleChain;
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        const std::string_view key = trim(rest.substr(0, comma));
        std::size_t start = 0;
        while (start <= key.size()) {
            const auto dash = key.find('-', start);
            out.emplace_back(key.substr(start, dash == std::string_view::npos ? key.npos : dash - start));
            if (dash == std::string_view::npos) break;
            start = dash + 1;
        }
        if (comma == std::string_view::npos) break;
        rest.remove_prefix(comma + 1);
    }
    return out;
}

void fill_successors(ChainKeyInstance& instance) {
    std::unordered_map<std::string, std::vector<std::string>> by_first;
    for (const auto& key : instance.keys) {
        by_first[std::string(first_word(key))].push_back(key);
    }
    instance.successor_map.clear();
    for (const auto& key : instance.keys) {
        auto it = by_first.find(std::string(last_word(key)));
        if (it != by_first.end() && it->second.size() == 1) {
            instance.successor_map[key] = it->second.front();
        }
    }
}

}  // namespace

std::string_view first_word(std::string_view key) { return key.substr(0, key.find('-')); }

std::string_view last_word(std::string_view key) {
    const auto dash = key.rfind('-');
    return dash == std::string_view::npos ? key : key.substr(dash + 1);
}

bool ChainKeyInstance::contains(std::string_view key) const {
    return std::find(keys.begin(), keys.end(), key) != keys.end();
}

std::string number_to_words(std::size_t n) {
    static const char* const kOnes[] = {"zero",    "one",     "two",       "three",    "four",
                                        "five",    "six",     "seven",     "eight",    "nine",
                                        "ten",     "eleven",  "twelve",    "thirteen", "fourteen",
                                        "fifteen", "sixteen", "seventeen", "eighteen", "nineteen"};
    static const char* const kTens[] = {"", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty",
                                        "ninety"};
    if (n >= 1000) {
        return std::to_string(n);
    }
    if (n < 20) {
        return kOnes[n];
    }
    if (n < 100) {
        std::string out = kTens[n / 10];
        if (n % 10 != 0) {
            out += "-" + std::string(kOnes[n % 10]);
        }
        return out;
    }
    std::string out = std::string(kOnes[n / 100]) + " hundred";
    if (n % 100 != 0) {
        out += " " + number_to_words(n % 100);
    }
    return out;
}

std::string chain_prompt(std::span<const std::string> keys, std::size_t T) {
    const std::string count = std::to_string(T);
    std::string prompt;
    prompt += kInstructionLead;
    prompt += count;
    prompt += kInstructionRule;
    prompt += " Example: ";
    prompt += kExampleChain;
    prompt += ". You must generate keys that are in the context. DO NOT REPEAT THE EXAMPLE.\n\nContext:";
    for (std::size_t i = 0; i < keys.size(); ++i) {
        prompt += "Name of key: " + keys[i] + "\n\n";
    }
    prompt += kInstructionLead;
    prompt += count;
    prompt += kInstructionRule;
    prompt += "You must generate keys that are in the context. Chain of " + number_to_words(T) + " keys:";
    return prompt;
}

ChainKeyInstance generate_chain_instance(std::size_t n_keys, std::size_t W, std::size_t T, std::uint64_t seed) {
    if (W < 2) {
        throw ConfigError("chain-of-key: W must be at least 2");
    }
    if (T == 0) {
        throw ConfigError("chain-of-key: T must be positive");
    }
    if (n_keys < std::max<std::size_t>(T, 2)) {
        throw ConfigError("chain-of-key: n_keys (" + std::to_string(n_keys) + ") must be at least max(T, 2)");
    }
    const auto excluded = example_words();
    std::vector<std::string> pool;
    for (const char* word : bundled_words()) {
        if (std::find(excluded.begin(), excluded.end(), word) == excluded.end()) {
            pool.emplace_back(word);
        }
    }
    const std::size_t needed = n_keys * (W - 1);
    if (needed > pool.size()) {
        throw ConfigError("chain-of-key: need " + std::to_string(needed) + " distinct words, word list has " +
                          std::to_string(pool.size()));
    }
    std::mt19937_64 rng(seed);
    std::shuffle(pool.begin(), pool.end(), rng);

    // Link words pool[0, n) form the cycle; each key takes W - 2 fresh middle words.
    ChainKeyInstance instance;
    instance.T = T;
    instance.W = W;
    instance.seed = seed;
    std::size_t next_middle = n_keys;
    for (std::size_t i = 0; i < n_keys; ++i) {
        std::string key = pool[i];
        for (std::size_t m = 0; m + 2 < W; ++m) {
            key += "-" + pool[next_middle++];
        }
        key += "-" + pool[(i + 1) % n_keys];
        instance.keys.push_back(std::move(key));
    }
    for (std::size_t i = 0; i < n_keys; ++i) {
        instance.successor_map[instance.keys[i]] = instance.keys[(i + 1) % n_keys];
    }
    std::shuffle(instance.keys.begin(), instance.keys.end(), rng);
    instance.prompt = chain_prompt(instance.keys, T);
    return instance;
}

ChainKeyInstance chain_instance_from_keys(std::vector<std::string> keys, std::size_t T) {
    if (T == 0) {
        throw ConfigError("chain-of-key: T must be positive");
    }
    ChainKeyInstance instance;
    instance.keys = std::move(keys);
    instance.T = T;
    instance.W = instance.keys.empty()
                     ? 0
                     : static_cast<std::size_t>(std::count(instance.keys.front().begin(), instance.keys.front().end(), '-')) + 1;
    fill_successors(instance);
    instance.prompt = chain_prompt(instance.keys, T);
    return instance;
}

ChainScore evaluate_chain(const ChainKeyInstance& instance, std::string_view output_text) {
    const std::unordered_set<std::string_view> context(instance.keys.begin(), instance.keys.end());
    ChainScore result;
    if (trim(output_text).empty() || instance.T == 0) {
        return result;
    }
    std::string_view previous;
    std::string_view rest = output_text;
    while (result.valid_prefix_length < instance.T) {
        const auto comma = rest.find(',');
        const std::string_view key = trim(rest.substr(0, comma));
        if (!context.contains(key)) {
            break;
        }
        if (result.valid_prefix_length > 0 && first_word(key) != last_word(previous)) {
            break;
        }
        ++result.valid_prefix_length;
        previous = key;
        if (comma == std::string_view::npos) {
            break;
        }
        rest.remove_prefix(comma + 1);
    }
    result.score = static_cast<double>(result.valid_prefix_length) / static_cast<double>(instance.T);
    return result;
}

nlohmann::json to_json(const ChainKeyInstance& instance) {
    return {{"prompt", instance.prompt},
            {"keys", instance.keys},
            {"successor_map", instance.successor_map},
            {"T", instance.T},
            {"W", instance.W},
            {"seed", instance.seed}};
}

ChainKeyInstance chain_instance_from_json(const nlohmann::json& j) {
    ChainKeyInstance instance;
    instance.keys = j.at("keys").get<std::vector<std::string>>();
    instance.T = j.at("T").get<std::size_t>();
    instance.W = j.value("W", std::size_t{2});
    instance.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("successor_map")) {
        instance.successor_map = j["successor_map"].get<std::map<std::string, std::string>>();
    } else {
        fill_successors(instance);
    }
    instance.prompt = j.contains("prompt") ? j["prompt"].get<std::string>() : chain_prompt(instance.keys, instance.T);
    return instance;
}

namespace {

std::vector<nlohmann::json> read_jsonl(std::istream& in, std::string_view what) {
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("instance_id")) {
            throw ConfigError(std::string(what) + " line " + std::to_string(line_no) +
                              ": expected a JSON object with instance_id");
        }
        out.push_back(std::move(j));
    }
    return out;
}

}  // namespace

void write_instances_jsonl(std::span<const IdentifiedInstance> instances, std::ostream& out) {
    for (const auto& item : instances) {
        nlohmann::json line = to_json(item.instance);
        line["instance_id"] = item.instance_id;
        out << line.dump() << '\n';
    }
}

std::vector<IdentifiedInstance> read_instances_jsonl(std::istream& in) {
    std::vector<IdentifiedInstance> out;
    for (const auto& j : read_jsonl(in, "instances")) {
        try {
            out.push_back({j.at("instance_id"), chain_instance_from_json(j)});
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("instance " + j.at("instance_id").dump() + ": " + e.what());
        }
    }
    return out;
}

std::vector<nlohmann::json> score_outputs_jsonl(std::span<const IdentifiedInstance> instances, std::istream& outputs) {
    std::vector<nlohmann::json> scores;
    for (const auto& j : read_jsonl(outputs, "outputs")) {
        const auto& id = j.at("instance_id");
        const auto it = std::find_if(instances.begin(), instances.end(),
                                     [&](const IdentifiedInstance& item) { return item.instance_id == id; });
        if (it == instances.end()) {
            throw ConfigError("outputs refer to unknown instance_id " + id.dump());
        }
        if (!j.contains("output_text") || !j["output_text"].is_string()) {
            throw ConfigError("output for " + id.dump() + " has no output_text string");
        }
        const ChainScore score = evaluate_chain(it->instance, j["output_text"].get<std::string>());
        scores.push_back({{"instance_id", id}, {"score", score.score}, {"valid_prefix_length", score.valid_prefix_length}});
    }
    return scores;
}

ScriptedOracle::ScriptedOracle(const ChainKeyInstance& instance, std::string start_key)
    : ScriptedOracle(instance, std::move(start_key), instance.T) {}

ScriptedOracle::ScriptedOracle(const ChainKeyInstance& instance, std::string start_key, std::size_t n_keys)
    : instance_(instance), current_(std::move(start_key)), remaining_(n_keys) {
    if (!instance_.contains(current_)) {
        throw ContractViolation("ScriptedOracle: start key '" + current_ + "' is not in the instance");
    }
}

std::optional<std::string> ScriptedOracle::next() {
    if (remaining_ == 0) {
        return std::nullopt;
    }
    std::string out = current_;
    --remaining_;
    if (remaining_ > 0) {
        auto it = instance_.successor_map.find(current_);
        if (it == instance_.successor_map.end()) {
            throw ContractViolation("ScriptedOracle: key '" + current_ + "' has no successor");
        }
        current_ = it->second;
    }
    return out;
}

std::string ScriptedOracle::emit_all() {
    std::string out;
    while (auto key = next()) {
        if (!out.empty()) {
            out += ", ";
        }
        out += *key;
    }
    return out;
}

std::string_view to_string(StreamStructure s) {
    return s == StreamStructure::uniform ? "uniform" : "repeated_motif";
}

StreamStructure stream_structure_from_string(std::string_view name) {
    if (name == "uniform") return StreamStructure::uniform;
    if (name == "repeated_motif") return StreamStructure::repeated_motif;
    throw ConfigError("unknown stream structure '" + std::string(name) + "'");
}

std::vector<int> synthetic_lm_stream(std::size_t length, std::size_t vocab, std::uint64_t seed,
                                     const StreamOptions& options) {
    if (vocab == 0) {
        throw ConfigError("synthetic stream: vocab must be positive");
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> token(0, static_cast<int>(vocab) - 1);
    std::vector<int> out(length);
    if (options.structure == StreamStructure::uniform) {
        for (int& t : out) {
            t = token(rng);
        }
        return out;
    }
    if (options.motif_period == 0) {
        throw ConfigError("synthetic stream: motif_period must be positive");
    }
    std::vector<int> motif(options.motif_period);
    for (int& t : motif) {
        t = token(rng);
    }
    std::bernoulli_distribution replace(std::clamp(options.noise, 0.0, 1.0));
    for (std::size_t i = 0; i < length; ++i) {
        out[i] = motif[i % motif.size()];
        if (replace(rng)) {
            out[i] = token(rng);
        }
    }
    return out;
}

std::vector<int> encode_bytes(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(static_cast<int>(c));
    }
    return out;
}

std::string decode_bytes(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        out.push_back(static_cast<char>(static_cast<unsigned char>(t & 0xff)));
    }
    return out;
}

}  // namespace refreshkv
