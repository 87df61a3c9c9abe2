#include "pir/study.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>

#include "pir/date.hpp"
#include "pir/rng.hpp"

namespace pir {

std::string_view to_string(Variant v) { return v == Variant::A ? "A" : "B"; }

Variant parse_variant(std::string_view s) {
    if (s == "A") return Variant::A;
    if (s == "B") return Variant::B;
    throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

double parse_timestamp(std::string_view s) {
    static const std::regex re(R"(^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(\.\d+)?(Z|[+-]\d{2}:\d{2})$)");
    std::cmatch m;
    if (!std::regex_match(s.data(), s.data() + s.size(), m, re)) {
        throw std::invalid_argument("malformed timestamp '" + std::string(s) + "'");
    }
    auto num = [&](int i) { return std::stoi(m[i].str()); };
    const Date day = Date::parse(std::string(s.substr(0, 10)));
    const int hh = num(4), mm = num(5), ss = num(6);
    if (hh > 23 || mm > 59 || ss > 59) throw std::invalid_argument("malformed timestamp '" + std::string(s) + "'");
    double t = static_cast<double>(day.days()) * 86400.0 + hh * 3600.0 + mm * 60.0 + ss;
    if (m[7].matched) t += std::stod("0" + m[7].str());
    const std::string zone = m[8].str();
    if (zone != "Z") {
        const int sign = zone[0] == '-' ? -1 : 1;
        const int oh = std::stoi(zone.substr(1, 2));
        const int om = std::stoi(zone.substr(4, 2));
        if (oh > 23 || om > 59) throw std::invalid_argument("malformed timestamp '" + std::string(s) + "'");
        t -= sign * (oh * 3600.0 + om * 60.0);
    }
    return t;
}

SessionSubmission SessionSubmission::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SessionRejected(422, "session body must be a JSON object");
    if (j.contains("variant")) throw SessionRejected(422, "variant is assigned by the server and must not be sent");
    SessionSubmission s;
    auto str = [&](const char* key) {
        if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty()) {
            throw SessionRejected(422, std::string("missing or invalid field '") + key + "'");
        }
        return j[key].get<std::string>();
    };
    s.participant_id = str("participant_id");
    s.task_id = str("task_id");
    s.started_at = str("started_at");
    s.submitted_at = str("submitted_at");
    if (!j.contains("satisfaction") || !j["satisfaction"].is_number_integer()) {
        throw SessionRejected(422, "satisfaction must be an integer from 1 to 5");
    }
    s.satisfaction = j["satisfaction"].get<int>();
    if (j.contains("duration_seconds")) {
        if (!j["duration_seconds"].is_number()) throw SessionRejected(422, "duration_seconds must be a number");
        s.duration_seconds = j["duration_seconds"].get<double>();
    }
    if (j.contains("timer_restarted")) {
        if (!j["timer_restarted"].is_boolean()) throw SessionRejected(422, "timer_restarted must be a boolean");
        s.timer_restarted = j["timer_restarted"].get<bool>();
    }
    if (j.contains("query_count")) {
        if (!j["query_count"].is_number_unsigned()) throw SessionRejected(422, "query_count must be a non-negative integer");
        s.query_count = j["query_count"].get<std::size_t>();
    }
    return s;
}

nlohmann::ordered_json session_to_json(const SessionLog& s) {
    return {{"session_id", s.session_id},
            {"participant_id", s.participant_id},
            {"task_id", s.task_id},
            {"variant", std::string(to_string(s.variant))},
            {"satisfaction", s.satisfaction},
            {"duration_seconds", s.duration_seconds},
            {"started_at", s.started_at},
            {"submitted_at", s.submitted_at},
            {"timer_restarted", s.timer_restarted},
            {"query_count", s.query_count}};
}

SessionLog session_from_json(const nlohmann::json& j) {
    SessionLog s;
    s.session_id = j.at("session_id").get<std::string>();
    s.participant_id = j.at("participant_id").get<std::string>();
    s.task_id = j.at("task_id").get<std::string>();
    s.variant = parse_variant(j.at("variant").get<std::string>());
    s.satisfaction = j.at("satisfaction").get<int>();
    s.duration_seconds = j.at("duration_seconds").get<double>();
    s.started_at = j.at("started_at").get<std::string>();
    s.submitted_at = j.at("submitted_at").get<std::string>();
    s.timer_restarted = j.value("timer_restarted", false);
    s.query_count = j.value("query_count", std::size_t{0});
    return s;
}

// ---------------------------------------------------------------------------

VariantAssignment::VariantAssignment(std::uint64_t seed, std::vector<std::string> tasks)
    : seed_(seed), tasks_(std::move(tasks)) {
    if (tasks_.empty()) throw std::invalid_argument("study task list must not be empty");
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
        if (!position_.emplace(tasks_[i], i).second) {
            throw std::invalid_argument("duplicate task id '" + tasks_[i] + "'");
        }
    }
}

namespace {

std::vector<std::size_t> seeded_permutation(std::size_t n, CounterRng rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace

Variant VariantAssignment::variant_for(const std::string& participant_id, const std::string& task_id) const {
    const auto it = position_.find(task_id);
    if (it == position_.end()) throw SessionRejected(422, "unknown task '" + task_id + "'");
    CounterRng rng = CounterRng(seed_).split("variant").split(participant_id);
    const auto perm = seeded_permutation(tasks_.size(), rng);
    // The first half of the shuffled positions get the participant's leading
    // variant; with an odd count the leading variant gets the smaller half.
    const bool lead_is_a = (rng.split("lead").next_u64() & 1U) == 0;
    const std::size_t slot = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), it->second) - perm.begin());
    const bool first_half = slot < tasks_.size() / 2;
    return first_half == lead_is_a ? Variant::A : Variant::B;
}

std::vector<std::string> VariantAssignment::task_order(const std::string& participant_id) const {
    const auto perm = seeded_permutation(tasks_.size(), CounterRng(seed_).split("order").split(participant_id));
    std::vector<std::string> out;
    out.reserve(perm.size());
    for (auto i : perm) out.push_back(tasks_[i]);
    return out;
}

// ---------------------------------------------------------------------------

StudyReport build_study_report(const std::vector<SessionLog>& sessions) {
    struct Acc {
        CompensatedSum satisfaction;
        CompensatedSum duration;
        std::size_t n = 0;
    };
    std::map<std::string, std::array<Acc, 2>> per_participant;
    StudyReport r;
    r.sessions = sessions.size();
    for (const auto& s : sessions) {
        auto& acc = per_participant[s.participant_id][s.variant == Variant::A ? 0 : 1];
        acc.satisfaction.add(s.satisfaction);
        acc.duration.add(s.duration_seconds);
        ++acc.n;
        (s.variant == Variant::A ? r.a : r.b).sessions++;
    }
    r.participants = per_participant.size();
    if (r.participants < 2) {
        throw SessionRejected(409, "the report needs at least two participants with sessions under both variants");
    }

    PairedSamples sat{{}, "A", "B"};
    PairedSamples dur{{}, "A", "B"};
    for (const auto& [pid, acc] : per_participant) {
        if (acc[0].n == 0 || acc[1].n == 0) {
            throw SessionRejected(409, "participant '" + pid + "' has no sessions under one of the variants");
        }
        const auto mean = [](const CompensatedSum& s, std::size_t n) { return s.value() / static_cast<double>(n); };
        sat.pairs.emplace_back(mean(acc[0].satisfaction, acc[0].n), mean(acc[1].satisfaction, acc[1].n));
        dur.pairs.emplace_back(mean(acc[0].duration, acc[0].n), mean(acc[1].duration, acc[1].n));
    }

    auto column_mean = [](const PairedSamples& p, bool first) {
        CompensatedSum s;
        for (const auto& [a, b] : p.pairs) s.add(first ? a : b);
        return s.value() / static_cast<double>(p.pairs.size());
    };
    r.a.mean_satisfaction = column_mean(sat, true);
    r.b.mean_satisfaction = column_mean(sat, false);
    r.a.mean_duration_seconds = column_mean(dur, true);
    r.b.mean_duration_seconds = column_mean(dur, false);

    try {
        r.satisfaction = paired_t_test(sat);
    } catch (const DegenerateSamples& e) {
        throw SessionRejected(422, std::string("satisfaction: ") + e.what());
    }
    try {
        r.duration = paired_t_test(dur);
    } catch (const DegenerateSamples& e) {
        throw SessionRejected(422, std::string("duration: ") + e.what());
    }
    return r;
}

nlohmann::ordered_json study_report_to_json(const StudyReport& r) {
    auto variant = [](const VariantSummary& v) {
        return nlohmann::ordered_json{{"sessions", v.sessions},
                                      {"mean_satisfaction", v.mean_satisfaction},
                                      {"mean_duration_seconds", v.mean_duration_seconds}};
    };
    auto test = [](const TTestResult& t) {
        return nlohmann::ordered_json{
            {"t", t.t}, {"df", t.df}, {"p_two_tailed", t.p_two_tailed}, {"mean_difference", t.mean_difference}};
    };
    return {{"participants", r.participants},
            {"sessions", r.sessions},
            {"variants", {{"A", variant(r.a)}, {"B", variant(r.b)}}},
            {"satisfaction", test(r.satisfaction)},
            {"duration", test(r.duration)}};
}

// ---------------------------------------------------------------------------

StudyLog::StudyLog(VariantAssignment assignment, std::optional<std::filesystem::path> path)
    : assignment_(std::move(assignment)), path_(std::move(path)) {
    if (!path_ || !std::filesystem::exists(*path_)) return;
    std::ifstream in(*path_);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        SessionLog s;
        try {
            s = session_from_json(nlohmann::json::parse(line));
        } catch (const std::exception& e) {
            throw std::runtime_error("malformed session log line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!by_key_.emplace(std::pair{s.participant_id, s.task_id}, sessions_.size()).second) {
            throw std::runtime_error("duplicate session in log at line " + std::to_string(line_no));
        }
        sessions_.push_back(std::move(s));
    }
}

SessionLog StudyLog::submit(const SessionSubmission& sub) {
    if (sub.satisfaction < 1 || sub.satisfaction > 5) {
        throw SessionRejected(422, "satisfaction must be an integer from 1 to 5");
    }
    double started = 0.0;
    double submitted = 0.0;
    try {
        started = parse_timestamp(sub.started_at);
        submitted = parse_timestamp(sub.submitted_at);
    } catch (const std::invalid_argument& e) {
        throw SessionRejected(422, e.what());
    }
    if (submitted < started) throw SessionRejected(422, "submitted_at precedes started_at");
    const double elapsed = submitted - started;
    if (sub.duration_seconds) {
        if (*sub.duration_seconds < 0.0) throw SessionRejected(422, "duration_seconds must be non-negative");
        if (std::abs(*sub.duration_seconds - elapsed) > kDurationTolerance) {
            throw SessionRejected(422, "duration_seconds disagrees with the timestamps by more than 2 s");
        }
    }

    SessionLog s;
    s.participant_id = sub.participant_id;
    s.task_id = sub.task_id;
    s.variant = assignment_.variant_for(sub.participant_id, sub.task_id);
    s.satisfaction = sub.satisfaction;
    s.duration_seconds = sub.duration_seconds.value_or(elapsed);
    s.started_at = sub.started_at;
    s.submitted_at = sub.submitted_at;
    s.timer_restarted = sub.timer_restarted;
    s.query_count = sub.query_count;
    char id[24];
    std::snprintf(id, sizeof id, "s-%016llx",
                  static_cast<unsigned long long>(fnv1a64(sub.task_id, fnv1a64(sub.participant_id + '\x1f'))));
    s.session_id = id;

    std::lock_guard lock(mutex_);
    const std::pair key{s.participant_id, s.task_id};
    if (by_key_.contains(key)) {
        throw SessionRejected(409, "a session for participant '" + s.participant_id + "' and task '" + s.task_id +
                                       "' already exists");
    }
    if (path_) {
        std::ofstream out(*path_, std::ios::app);
        out << session_to_json(s).dump() << '\n';
        out.flush();
        if (!out) throw std::runtime_error("cannot append to session log " + path_->string());
    }
    by_key_.emplace(key, sessions_.size());
    sessions_.push_back(s);
    return s;
}

std::vector<SessionLog> StudyLog::sessions() const {
    std::lock_guard lock(mutex_);
    return sessions_;
}

std::vector<std::string> StudyLog::completed_tasks(const std::string& participant_id) const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& s : sessions_) {
        if (s.participant_id == participant_id) out.push_back(s.task_id);
    }
    return out;
}

}  // namespace pir
