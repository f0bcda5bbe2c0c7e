// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace cmdskel {

namespace {

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ValueError("config: bad numeric value '" + v + "' for " + key);
    }
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long d = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<int>(d);
    } catch (const std::exception&) {
        throw ValueError("config: bad integer value '" + v + "' for " + key);
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ValueError("config: bad unsigned value '" + v + "' for " + key);
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValueError("config: bad boolean value '" + v + "' for " + key);
}

struct Field {
    std::string name;
    std::string (*get)(const TrainConfig&);
    void (*set)(TrainConfig&, const std::string&);
};

#define CFG_DOUBLE(field)                                                              \
    Field{#field, [](const TrainConfig& c) { return format_double(c.field); },        \
          [](TrainConfig& c, const std::string& v) { c.field = parse_double(#field, v); }}
#define CFG_INT(field)                                                                 \
    Field{#field, [](const TrainConfig& c) { return std::to_string(c.field); },       \
          [](TrainConfig& c, const std::string& v) { c.field = parse_int(#field, v); }}
#define CFG_U64(field)                                                                 \
    Field{#field, [](const TrainConfig& c) { return std::to_string(c.field); },       \
          [](TrainConfig& c, const std::string& v) { c.field = parse_u64(#field, v); }}
#define CFG_BOOL(field)                                                                    \
    Field{#field,                                                                          \
          [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); },    \
          [](TrainConfig& c, const std::string& v) { c.field = parse_bool(#field, v); }}
#define CFG_STRING(field)                                                              \
    Field{#field, [](const TrainConfig& c) { return c.field; },                       \
          [](TrainConfig& c, const std::string& v) { c.field = v; }}

const std::vector<Field>& fields() {
    static const std::vector<Field> kFields = {
        CFG_STRING(modalities),
        CFG_DOUBLE(tau_c),
        CFG_DOUBLE(tau_t),
        CFG_DOUBLE(tau_s),
        CFG_INT(K),
        CFG_INT(N),
        CFG_DOUBLE(alpha),
        CFG_INT(batch_size),
        CFG_DOUBLE(lr),
        CFG_DOUBLE(sgd_momentum),
        CFG_DOUBLE(weight_decay),
        CFG_INT(epochs),
        CFG_INT(lr_drop_epoch),
        CFG_DOUBLE(lr_drop_factor),
        CFG_U64(seed),
        CFG_INT(hidden_dim),
        CFG_INT(embedding_dim),
        CFG_INT(temporal_length),
        CFG_STRING(pooling),
        CFG_BOOL(shared_aug_seed),
        CFG_DOUBLE(cmd_weight),
        CFG_BOOL(train_fp32_storage),
        CFG_INT(threads),
        CFG_INT(checkpoint_every),
        CFG_BOOL(debug_provenance),
        CFG_DOUBLE(aug_crop_min),
        CFG_DOUBLE(aug_crop_max),
        CFG_DOUBLE(aug_rot_prob),
        CFG_DOUBLE(aug_rot_max_deg),
        CFG_DOUBLE(aug_shear_prob),
        CFG_DOUBLE(aug_shear_max),
        CFG_DOUBLE(aug_jitter_prob),
        CFG_DOUBLE(aug_jitter_sigma),
    };
    return kFields;
}

#undef CFG_DOUBLE
#undef CFG_INT
#undef CFG_U64
#undef CFG_BOOL
#undef CFG_STRING

const Field& find_field(const std::string& key) {
    for (const Field& f : fields()) {
        if (f.name == key) return f;
    }
    throw ValueError("config: unknown key '" + key + "'");
}

}  // namespace

void TrainConfig::validate() const {
    if (modality_list().empty()) throw ValueError("config: at least one modality is required");
    if (!(tau_c > 0) || !(tau_s > 0) || tau_t < 0) throw ValueError("config: bad temperatures");
    if (K < 1 || N < 1 || K > N) throw ValueError("config: need 1 <= K <= N");
    if (alpha < 0 || alpha > 1) throw ValueError("config: alpha must lie in [0, 1]");
    if (batch_size < 1 || !(lr >= 0) || sgd_momentum < 0 || weight_decay < 0) {
        throw ValueError("config: bad optimizer settings");
    }
    if (epochs < 0 || (epochs > 0 && lr_drop_epoch >= epochs) || lr_drop_epoch < 0 ||
        !(lr_drop_factor > 0)) {
        throw ValueError("config: bad schedule (need 0 <= lr_drop_epoch < epochs)");
    }
    if (hidden_dim < 1 || embedding_dim < 1 || temporal_length < 1) {
        throw ValueError("config: bad encoder dimensions");
    }
    if (batch_size > N) throw ValueError("config: batch_size must not exceed the bank size N");
    if (cmd_weight < 0) throw ValueError("config: cmd_weight must be >= 0");
    parse_pool_mode(pooling);
    augment_config().validate();
}

std::vector<Modality> TrainConfig::modality_list() const {
    std::vector<Modality> out;
    std::stringstream ss(modalities);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        const Modality m = parse_modality(tok);
        if (std::find(out.begin(), out.end(), m) != out.end()) {
            throw ValueError("config: duplicate modality '" + tok + "'");
        }
        out.push_back(m);
    }
    return out;
}

std::vector<std::pair<Modality, Modality>> TrainConfig::modality_pairs() const {
    const std::vector<Modality> mods = modality_list();
    std::vector<std::pair<Modality, Modality>> pairs;
    for (size_t i = 0; i < mods.size(); ++i) {
        for (size_t j = i + 1; j < mods.size(); ++j) pairs.emplace_back(mods[i], mods[j]);
    }
    return pairs;
}

AugmentConfig TrainConfig::augment_config() const {
    AugmentConfig a;
    a.target_frames = temporal_length;
    a.crop_min = aug_crop_min;
    a.crop_max = aug_crop_max;
    a.rot_prob = aug_rot_prob;
    a.rot_max_deg = aug_rot_max_deg;
    a.shear_prob = aug_shear_prob;
    a.shear_max = aug_shear_max;
    a.jitter_prob = aug_jitter_prob;
    a.jitter_sigma = aug_jitter_sigma;
    return a;
}

EncoderConfig TrainConfig::encoder_config(int joints) const {
    EncoderConfig e;
    e.input_dim = SkeletonSequence::kActors * joints * 3;
    e.hidden_dim = hidden_dim;
    e.embedding_dim = embedding_dim;
    e.num_layers = 3;
    e.pooling = parse_pool_mode(pooling);
    return e;
}

CmdConfig TrainConfig::cmd_config() const {
    CmdConfig c;
    c.k = K;
    c.tau_t = tau_t;
    c.tau_s = tau_s;
    return c;
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const Field& f : fields()) k.push_back(f.name);
        return k;
    }();
    return keys;
}

std::string config_get(const TrainConfig& cfg, const std::string& key) {
    return find_field(key).get(cfg);
}

void config_set(TrainConfig& cfg, const std::string& key, const std::string& value) {
    find_field(key).set(cfg, value);
}

void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) +
                             ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            config_set(cfg, key, value);
        } catch (const ValueError& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

std::string config_text(const TrainConfig& cfg) {
    std::ostringstream os;
    for (const std::string& key : config_keys()) {
        os << key << " = " << config_get(cfg, key) << "\n";
    }
    return os.str();
}

uint64_t fnv1a(const void* data, size_t len, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t config_hash(const TrainConfig& cfg) {
    const std::string text = config_text(cfg);
    return fnv1a(text.data(), text.size());
}

std::string hash_hex(uint64_t h) {
    static const char* kHex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = kHex[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace cmdskel
