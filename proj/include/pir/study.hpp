#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pir/metrics.hpp"

namespace pir {

enum class Variant { A, B };
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

// Seconds since the Unix epoch for an ISO-8601 UTC or offset timestamp such
// as "2024-03-01T10:15:00Z" or "2024-03-01T12:15:00.5+02:00".
double parse_timestamp(std::string_view s);

struct SessionSubmission {
    std::string participant_id;
    std::string task_id;
    int satisfaction = 0;
    std::string started_at;
    std::string submitted_at;
    std::optional<double> duration_seconds;  // client timer, checked against the timestamps
    bool timer_restarted = false;
    std::size_t query_count = 0;

    // Throws SessionRejected(422) on missing or mistyped fields. A "variant"
    // key is rejected too: the client never chooses it.
    static SessionSubmission from_json(const nlohmann::json& j);
};

struct SessionLog {
    std::string session_id;
    std::string participant_id;
    std::string task_id;
    Variant variant = Variant::A;
    int satisfaction = 0;
    double duration_seconds = 0.0;
    std::string started_at;
    std::string submitted_at;
    bool timer_restarted = false;
    std::size_t query_count = 0;
};

nlohmann::ordered_json session_to_json(const SessionLog& s);
SessionLog session_from_json(const nlohmann::json& j);

// Rejection carrying the HTTP status the service answers with.
class SessionRejected : public std::runtime_error {
public:
    SessionRejected(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

inline constexpr double kDurationTolerance = 2.0;

// Balanced, seeded task -> variant mapping per participant. With a task list
// of n tasks each participant gets floor(n/2) of one variant and the rest of
// the other, positions drawn from a shuffle keyed on (seed, participant).
class VariantAssignment {
public:
    VariantAssignment(std::uint64_t seed, std::vector<std::string> tasks);

    // Throws SessionRejected(422) for a task outside the list.
    Variant variant_for(const std::string& participant_id, const std::string& task_id) const;

    // Task order presented to the participant (seeded shuffle).
    std::vector<std::string> task_order(const std::string& participant_id) const;

    const std::vector<std::string>& tasks() const { return tasks_; }
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<std::string> tasks_;
    std::map<std::string, std::size_t> position_;
};

struct VariantSummary {
    std::size_t sessions = 0;
    double mean_satisfaction = 0.0;
    double mean_duration_seconds = 0.0;
};

struct StudyReport {
    std::size_t participants = 0;
    std::size_t sessions = 0;
    VariantSummary a;
    VariantSummary b;
    TTestResult satisfaction;  // A - B
    TTestResult duration;      // A - B
};

// Per-participant means per variant first, then paired t-tests across
// participants. Throws SessionRejected(409) when fewer than two participants
// or any participant lacks a variant, and SessionRejected(422) when a
// measure has zero variance across participants.
StudyReport build_study_report(const std::vector<SessionLog>& sessions);
nlohmann::ordered_json study_report_to_json(const StudyReport& r);

// Append-only JSONL log. Construction replays an existing file; submit()
// validates, assigns the variant, checks duplicates and appends under one lock.
class StudyLog {
public:
    StudyLog(VariantAssignment assignment, std::optional<std::filesystem::path> path);

    SessionLog submit(const SessionSubmission& submission);

    std::vector<SessionLog> sessions() const;
    std::vector<std::string> completed_tasks(const std::string& participant_id) const;
    const VariantAssignment& assignment() const { return assignment_; }

private:
    VariantAssignment assignment_;
    std::optional<std::filesystem::path> path_;
    mutable std::mutex mutex_;
    std::vector<SessionLog> sessions_;
    std::map<std::pair<std::string, std::string>, std::size_t> by_key_;
};

}  // namespace pir
