// Synthetic corpus generator: writes a FASTA corpus from the positional
// family template generator, optionally with a labeled CSV for the probe
// (label = fraction of GCT codons).

#include <CLI11.hpp>

#include <iostream>

#include "codonball/io.hpp"
#include "codonball/train.hpp"

namespace cb = codonball;

int main(int argc, char** argv) {
    CLI::App app{"synthetic codon corpus generator"};
    cb::train::CorpusConfig cfg;
    std::string out = "corpus.fasta";
    std::string labels_path;
    std::vector<std::string> weight_specs;
    app.add_option("--out", out, "FASTA path to write")->required();
    app.add_option("--sequences", cfg.sequences, "number of sequences");
    app.add_option("--length", cfg.length, "codons per sequence");
    app.add_option("--bias-temp", cfg.bias_temp, "within-family bias temperature (0 = fully biased)");
    app.add_option("--template-noise", cfg.template_noise, "chance a position ignores the template");
    app.add_flag("--framing", cfg.framing, "ATG start / stop end");
    app.add_option("--seed", cfg.seed, "random seed");
    app.add_option("--family-weight", weight_specs, "template weight, e.g. Alanine=8")->expected(-1);
    app.add_option("--labels", labels_path, "also write sequence,label CSV (GCT fraction)");
    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto& spec : weight_specs) {
            const auto eq = spec.find('=');
            if (eq == std::string::npos)
                throw cb::ValidationError("--family-weight expects Name=weight, got '" + spec + "'");
            cfg.family_weights[spec.substr(0, eq)] = std::stod(spec.substr(eq + 1));
        }
        auto corpus = cb::train::generate_corpus(cfg);
        cb::io::write_fasta(out, cb::train::corpus_to_fasta(corpus));
        if (!labels_path.empty()) {
            cb::io::LabeledData data;
            for (const auto& seq : corpus) {
                data.sequences.push_back(cb::lm::detokenize(seq));
                data.labels.push_back(cb::train::gct_fraction(seq));
            }
            cb::io::write_labeled_csv(labels_path, data);
        }
        std::cout << "wrote " << corpus.size() << " sequences to " << out << std::endl;
        return 0;
    } catch (const cb::ValidationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << std::endl;
        return 2;
    }
}
