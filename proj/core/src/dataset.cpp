// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cmdskel {

using nlohmann::json;

int Dataset::num_classes() const {
    int max_label = -1;
    for (const SkeletonSequence& s : items) {
        if (s.label) max_label = std::max(max_label, *s.label);
    }
    return max_label + 1;
}

namespace {

[[noreturn]] void parse_fail(const std::filesystem::path& path, size_t line, const std::string& why) {
    throw ParseError(path.string() + ":" + std::to_string(line) + ": " + why);
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file " + path.string());

    Dataset ds;
    std::string line;
    size_t line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            parse_fail(path, line_no, std::string("invalid JSON: ") + e.what());
        }
        if (!saw_header) {
            if (!j.contains("format") || j["format"] != "cmd-skel") {
                parse_fail(path, line_no, "expected header {\"format\":\"cmd-skel\",...}");
            }
            if (j.value("version", 0) != 1) parse_fail(path, line_no, "unsupported version");
            if (j.value("actors", 0) != SkeletonSequence::kActors) {
                parse_fail(path, line_no, "actors must be 2");
            }
            ds.joints = j.value("joints", 0);
            if (ds.joints < 1) parse_fail(path, line_no, "header joints must be >= 1");
            saw_header = true;
            continue;
        }
        if (!j.contains("frames") || !j["frames"].is_array()) {
            parse_fail(path, line_no, "record is missing a \"frames\" array");
        }
        const json& frames = j["frames"];
        const int t_len = static_cast<int>(frames.size());
        if (t_len < 1) parse_fail(path, line_no, "record has no frames");
        SkeletonSequence seq(t_len, ds.joints);
        if (j.contains("label") && !j["label"].is_null()) seq.label = j["label"].get<int>();
        if (j.contains("subject") && !j["subject"].is_null()) seq.subject = j["subject"].get<int>();
        for (int t = 0; t < t_len; ++t) {
            const json& frame = frames[static_cast<size_t>(t)];
            if (!frame.is_array() || frame.size() != SkeletonSequence::kActors) {
                parse_fail(path, line_no, "frame " + std::to_string(t) + " must hold 2 actors");
            }
            for (int a = 0; a < SkeletonSequence::kActors; ++a) {
                const json& actor = frame[static_cast<size_t>(a)];
                if (!actor.is_array() || static_cast<int>(actor.size()) != ds.joints) {
                    throw ShapeError(path.string() + ":" + std::to_string(line_no) +
                                     ": joint count disagrees with header (" +
                                     std::to_string(actor.size()) + " vs " + std::to_string(ds.joints) +
                                     ")");
                }
                for (int jt = 0; jt < ds.joints; ++jt) {
                    const json& coords = actor[static_cast<size_t>(jt)];
                    if (!coords.is_array() || coords.size() != 3) {
                        parse_fail(path, line_no, "joint entries must be [x,y,z]");
                    }
                    for (int c = 0; c < 3; ++c) {
                        if (!coords[static_cast<size_t>(c)].is_number()) {
                            parse_fail(path, line_no, "non-numeric coordinate");
                        }
                        seq.at(t, a, jt, c) = coords[static_cast<size_t>(c)].get<double>();
                    }
                }
            }
        }
        ds.items.push_back(std::move(seq));
    }
    return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write dataset file " + path.string());

    if (ds.joints > 0 || !ds.items.empty()) {
        json header = {{"format", "cmd-skel"},
                       {"version", 1},
                       {"joints", ds.joints},
                       {"actors", SkeletonSequence::kActors}};
        out << header.dump() << "\n";
    }
    for (const SkeletonSequence& seq : ds.items) {
        json rec;
        rec["label"] = seq.label ? json(*seq.label) : json(nullptr);
        rec["subject"] = seq.subject ? json(*seq.subject) : json(nullptr);
        json frames = json::array();
        for (int t = 0; t < seq.frames(); ++t) {
            json frame = json::array();
            for (int a = 0; a < SkeletonSequence::kActors; ++a) {
                json actor = json::array();
                for (int jt = 0; jt < seq.joints(); ++jt) {
                    actor.push_back({seq.at(t, a, jt, 0), seq.at(t, a, jt, 1), seq.at(t, a, jt, 2)});
                }
                frame.push_back(std::move(actor));
            }
            frames.push_back(std::move(frame));
        }
        rec["frames"] = std::move(frames);
        out << rec.dump() << "\n";
    }
    if (!out) throw IoError("failed while writing " + path.string());
}

}  // namespace cmdskel
