#include <catch2/catch_amalgamated.hpp>

#include "longrep/corpus.hpp"

using namespace longrep;

TEST_CASE("format_report removes newlines, tabs and double spaces") {
    CHECK(format_report("A\n\nB") == "A B");
    CHECK(format_report("A\tB  C") == "A B C");
    CHECK(format_report("") == "");
    CHECK(format_report("  lead and trail \t ") == "lead and trail");
}

TEST_CASE("format_report is idempotent") {
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        std::string s;
        int len = static_cast<int>(rng.uniform_int(60));
        for (int k = 0; k < len; ++k) {
            const char pool[] = " \t\nabcX.";
            s.push_back(pool[rng.uniform_int(sizeof(pool) - 1)]);
        }
        std::string once = format_report(s);
        CHECK(format_report(once) == once);
        CHECK(once.find('\n') == std::string::npos);
        CHECK(once.find('\t') == std::string::npos);
        CHECK(once.find("  ") == std::string::npos);
    }
}

namespace {

StudyRecord make_study(const std::string& pid, int index, int64_t ts, int n_images = 1,
                       bool with_sections = true) {
    StudyRecord s;
    s.patient_id = pid;
    s.study_index = index;
    s.timestamp = ts;
    for (int i = 0; i < n_images; ++i) {
        ImageGrid img;
        img.side = 4;
        img.pixels.assign(16, 0.5f);
        s.images.push_back(img);
    }
    if (with_sections) {
        s.findings_text = "No effusion.";
        s.impression_text = "No acute abnormality.";
    }
    s.latent_labels.assign(TemplateBank::kNumConditions, 0);
    return s;
}

}  // namespace

TEST_CASE("apply_exclusions drops bad studies and re-indexes") {
    PatientRecord p;
    p.patient_id = "p0";
    p.studies = {make_study("p0", 1, 10), make_study("p0", 2, 20, 6),
                 make_study("p0", 3, 30)};
    auto out = apply_exclusions({p});
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].studies.size() == 2);
    CHECK(out[0].studies[0].timestamp == 10);
    CHECK(out[0].studies[1].timestamp == 30);
    CHECK(out[0].studies[0].study_index == 1);
    CHECK(out[0].studies[1].study_index == 2);
}

TEST_CASE("apply_exclusions removes tied studies and all later ones") {
    PatientRecord p;
    p.patient_id = "p0";
    p.studies = {make_study("p0", 1, 1), make_study("p0", 2, 5), make_study("p0", 3, 5),
                 make_study("p0", 4, 9)};
    auto out = apply_exclusions({p});
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].studies.size() == 1);
    CHECK(out[0].studies[0].timestamp == 1);
}

TEST_CASE("apply_exclusions keeps valid input unchanged") {
    PatientRecord p;
    p.patient_id = "p0";
    p.studies = {make_study("p0", 1, 1), make_study("p0", 2, 2)};
    auto out = apply_exclusions({p});
    REQUIRE(out.size() == 1);
    CHECK(out[0] == p);
}

TEST_CASE("apply_exclusions drops patients left with no studies") {
    PatientRecord p;
    p.patient_id = "p0";
    p.studies = {make_study("p0", 1, 1, 1, false)};
    CHECK(apply_exclusions({p}).empty());
}

TEST_CASE("generate_corpus with zero patients gives empty splits") {
    GeneratorConfig cfg;
    cfg.num_train_patients = 0;
    cfg.num_val_patients = 0;
    cfg.num_test_patients = 0;
    CorpusSplit c = generate_corpus(cfg);
    CHECK(c.train.empty());
    CHECK(c.validation.empty());
    CHECK(c.test.empty());
}

TEST_CASE("generate_corpus rejects invalid config") {
    GeneratorConfig cfg;
    cfg.persistence = 1.5;
    CHECK_THROWS_AS(generate_corpus(cfg), ValidationError);
}

TEST_CASE("generate_corpus is deterministic for a fixed seed") {
    GeneratorConfig cfg;
    cfg.num_train_patients = 20;
    cfg.num_val_patients = 4;
    cfg.num_test_patients = 4;
    cfg.seed = 11;
    CorpusSplit a = generate_corpus(cfg);
    CorpusSplit b = generate_corpus(cfg);
    CHECK(a.train == b.train);
    CHECK(a.validation == b.validation);
    CHECK(a.test == b.test);
}

TEST_CASE("p=1 forces identical labels across a patient's studies") {
    GeneratorConfig cfg;
    cfg.num_train_patients = 30;
    cfg.num_val_patients = 0;
    cfg.num_test_patients = 0;
    cfg.persistence = 1.0;
    cfg.seed = 3;
    CorpusSplit c = generate_corpus(cfg);
    for (const PatientRecord& p : c.train)
        for (const StudyRecord& s : p.studies)
            CHECK(s.latent_labels == p.studies[0].latent_labels);
}

TEST_CASE("empirical persistence matches p=0.9 on a large corpus") {
    GeneratorConfig cfg;  // defaults: ~2000 train studies
    cfg.seed = 5;
    CorpusSplit c = generate_corpus(cfg);
    size_t train_studies = 0;
    for (const PatientRecord& p : c.train) train_studies += p.studies.size();
    CHECK(train_studies > 1500);
    double rate = measured_persistence(c.train);
    CHECK(rate == Catch::Approx(0.9).margin(0.02));
}

TEST_CASE("generated studies satisfy the structural invariants") {
    GeneratorConfig cfg;
    cfg.num_train_patients = 50;
    cfg.num_val_patients = 5;
    cfg.num_test_patients = 5;
    cfg.seed = 9;
    CorpusSplit c = generate_corpus(cfg);
    REQUIRE(!c.train.empty());
    for (const PatientRecord& p : c.train) {
        int64_t prev_ts = INT64_MIN;
        for (size_t i = 0; i < p.studies.size(); ++i) {
            const StudyRecord& s = p.studies[i];
            CHECK(s.study_index == static_cast<int>(i) + 1);
            CHECK(s.timestamp > prev_ts);
            prev_ts = s.timestamp;
            CHECK(s.images.size() >= 1);
            CHECK(s.images.size() <= 5);
            CHECK(!s.findings_text.empty());
            CHECK(!s.impression_text.empty());
            for (const ImageGrid& img : s.images) img.validate();
        }
    }
}
