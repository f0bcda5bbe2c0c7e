// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace cmdskel {

using nlohmann::json;

namespace {

struct ArrayRef {
    std::string name;
    std::string dtype;  // "f64" | "i64"
    std::vector<int> shape;
    const void* data = nullptr;
    size_t bytes = 0;
};

void collect_arrays(const Checkpoint& ckpt, std::vector<ArrayRef>& out) {
    for (const ModalityState& ms : ckpt.modalities) {
        const std::string prefix = to_string(ms.modality) + "/";
        auto add_tensor = [&](const std::string& name, const Tensor& t) {
            out.push_back({name, "f64", t.shape(), t.data(),
                           static_cast<size_t>(t.size()) * sizeof(double)});
        };
        const_cast<EncoderParams&>(ms.pair.query)
            .for_each_state([&](const std::string& n, Tensor& t) { add_tensor(prefix + "query/" + n, t); });
        const_cast<EncoderParams&>(ms.pair.key)
            .for_each_state([&](const std::string& n, Tensor& t) { add_tensor(prefix + "key/" + n, t); });
        size_t vi = 0;
        const_cast<EncoderParams&>(ms.pair.query)
            .for_each_trainable([&](const std::string& n, Tensor&) {
                add_tensor(prefix + "velocity/" + n, ms.velocity[vi++]);
            });
        add_tensor(prefix + "bank/entries", ms.bank.entries());
        out.push_back({prefix + "bank/provenance", "i64",
                       {static_cast<int>(ms.bank.provenance().size())}, ms.bank.provenance().data(),
                       ms.bank.provenance().size() * sizeof(int64_t)});
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::vector<ArrayRef> arrays;
    collect_arrays(ckpt, arrays);

    json manifest;
    manifest["format"] = "cmd-ckpt";
    manifest["version"] = ckpt.version;
    manifest["epoch"] = ckpt.epoch;
    manifest["global_step"] = ckpt.global_step;
    manifest["joints"] = ckpt.joints;
    manifest["config_hash"] = hash_hex(config_hash(ckpt.config));
    json cfg = json::object();
    for (const std::string& key : config_keys()) cfg[key] = config_get(ckpt.config, key);
    manifest["config"] = std::move(cfg);
    json banks = json::object();
    for (const ModalityState& ms : ckpt.modalities) {
        banks[to_string(ms.modality)] = {{"cursor", ms.bank.cursor()}, {"filled", ms.bank.filled()}};
    }
    manifest["banks"] = std::move(banks);

    json index = json::array();
    size_t offset = 0;
    for (const ArrayRef& a : arrays) {
        index.push_back(
            {{"name", a.name}, {"dtype", a.dtype}, {"shape", a.shape}, {"offset", offset}});
        offset += a.bytes;
    }
    manifest["arrays"] = std::move(index);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out << manifest.dump() << "\n";
    for (const ArrayRef& a : arrays) {
        out.write(static_cast<const char*>(a.data), static_cast<std::streamsize>(a.bytes));
    }
    if (!out) throw IoError("failed while writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path.string() + ": missing manifest line");
    json manifest;
    try {
        manifest = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": bad manifest: " + e.what());
    }
    if (manifest.value("format", "") != "cmd-ckpt" || manifest.value("version", 0) != 1) {
        throw ParseError(path.string() + ": not a version-1 checkpoint");
    }

    Checkpoint ckpt;
    ckpt.version = 1;
    ckpt.epoch = manifest.value("epoch", 0);
    ckpt.global_step = manifest.value("global_step", 0ll);
    ckpt.joints = manifest.value("joints", 0);
    for (auto& [key, value] : manifest.at("config").items()) {
        config_set(ckpt.config, key, value.get<std::string>());
    }

    const std::streampos blob_start = in.tellg();
    auto read_array = [&](const json& entry, void* dst, size_t bytes) {
        const size_t offset = entry.at("offset").get<size_t>();
        in.seekg(blob_start + static_cast<std::streamoff>(offset));
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
        if (!in) throw ParseError(path.string() + ": truncated array " +
                                  entry.at("name").get<std::string>());
    };
    std::map<std::string, const json*> by_name;
    for (const json& entry : manifest.at("arrays")) {
        by_name[entry.at("name").get<std::string>()] = &entry;
    }
    auto load_tensor = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ParseError(path.string() + ": missing array " + name);
        const json& entry = *it->second;
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        Tensor t(shape);
        read_array(entry, t.data(), static_cast<size_t>(t.size()) * sizeof(double));
        return t;
    };

    const EncoderConfig enc_cfg = ckpt.config.encoder_config(ckpt.joints);
    for (const Modality m : ckpt.config.modality_list()) {
        ModalityState ms;
        ms.modality = m;
        const std::string prefix = to_string(m) + "/";
        ms.pair.alpha = ckpt.config.alpha;
        ms.pair.query = init_encoder(enc_cfg, 0);
        ms.pair.key = init_encoder(enc_cfg, 0);
        ms.pair.query.for_each_state([&](const std::string& n, Tensor& t) {
            Tensor loaded = load_tensor(prefix + "query/" + n);
            if (!loaded.same_shape(t)) throw ParseError("checkpoint array " + n + " has wrong shape");
            t = std::move(loaded);
        });
        ms.pair.key.for_each_state([&](const std::string& n, Tensor& t) {
            Tensor loaded = load_tensor(prefix + "key/" + n);
            if (!loaded.same_shape(t)) throw ParseError("checkpoint array " + n + " has wrong shape");
            t = std::move(loaded);
        });
        ms.pair.query.for_each_trainable([&](const std::string& n, Tensor&) {
            ms.velocity.push_back(load_tensor(prefix + "velocity/" + n));
        });

        Tensor entries = load_tensor(prefix + "bank/entries");
        const json& prov_entry = *by_name.at(prefix + "bank/provenance");
        std::vector<int64_t> prov(
            static_cast<size_t>(prov_entry.at("shape").get<std::vector<int>>().at(0)));
        read_array(prov_entry, prov.data(), prov.size() * sizeof(int64_t));
        const json& bank_meta = manifest.at("banks").at(to_string(m));
        ms.bank.restore(std::move(entries), bank_meta.at("cursor").get<int>(),
                        bank_meta.at("filled").get<int>(), std::move(prov));
        ckpt.modalities.push_back(std::move(ms));
    }
    return ckpt;
}

uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    uint64_t h = 1469598103934665603ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
        if (!in) break;
    }
    return h;
}

}  // namespace cmdskel
