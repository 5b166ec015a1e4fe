import os
import sys
import unittest

# Ajouter les répertoires du projet et des tests au path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

try:
    from approvaltests import verify
    from approvaltests.approvals import get_default_namer
    from approvaltests.reporters import PythonNativeReporter
except ImportError:
    print("❌ ApprovalTests n'est pas installé. Installez-le avec: pip install approvaltests")
    sys.exit(1)

from generate_golden_masters import APPROVED_DIR, build_test_cases, is_pinned, run_cli  # noqa: E402
from generate_received_files import RECEIVED_DIR, received_path, write_received  # noqa: E402


def approve_reference(argv):
    """Sortie de la CLI pour les cas numériques non figés ; le fichier approuvé
    manquant est amorcé par une première exécution.

    Le second appel, vérifié par ApprovalTests, tourne dans un processus neuf :
    c'est le contrat de déterminisme qui est testé.
    """
    approved = get_default_namer().get_approved_filename()
    if not os.path.exists(approved):
        with open(approved, "w", encoding="utf-8") as f:
            f.write(run_cli(argv))
    return run_cli(argv)


class TestDeformScanCli(unittest.TestCase):

    def setUp(self):
        """Configuration avant chaque test."""
        os.makedirs(RECEIVED_DIR, exist_ok=True)

    def test_ds_1_1_serialize_cube(self):
        """DS-1.1: Serialize the unit cube corners"""
        output = run_cli(["serialize", "tests/fixtures/cube8.xyz"])
        verify(output, reporter=PythonNativeReporter())

    def test_ds_1_2_serialize_colored_ply(self):
        """DS-1.2: Serialize a colored PLY at order 3"""
        output = run_cli(["serialize", "tests/fixtures/tetra_color.ply", "--order", "3"])
        verify(output, reporter=PythonNativeReporter())

    def test_ds_2_1_deform_scan_toy(self):
        """DS-2.1: Deform-scan the toy model on a 32-point cloud"""
        output = approve_reference(["deform-scan", "tests/fixtures/cloud32.xyz", "--config", "tests/fixtures/toy.cfg"])
        verify(output, reporter=PythonNativeReporter())

    def test_ds_3_1_gdr_limit_report(self):
        """DS-3.1: Limit report of the reordering weights"""
        output = approve_reference(["gdr-demo", "--n", "8", "--sigmas", "1e-3,0.2,1e6"])
        verify(output, reporter=PythonNativeReporter())

    def test_ds_3_2_single_token_limits(self):
        """DS-3.2: Limit report of a single token"""
        output = run_cli(["gdr-demo", "--n", "1", "--sigmas", "1e-3,1e6"])
        verify(output, reporter=PythonNativeReporter())


class TestBulkComparison(unittest.TestCase):
    """Test en lot pour comparer tous les fichiers approved vs received."""

    def test_all_cases_match_approved(self):
        """Compare tous les cas de test avec leurs fichiers approved."""
        cases = build_test_cases()
        results = []

        for case in cases:
            case_id = case["id"]

            try:
                received_output = run_cli(case["argv"])
            except RuntimeError as exc:
                results.append(f"❌ {case_id}: Erreur d'exécution - {exc}")
                continue

            approved_path = os.path.join(APPROVED_DIR, f"{case_id}.approved.txt")
            if not os.path.exists(approved_path):
                marker = "❌" if is_pinned(case) else "⚠️ "
                results.append(f"{marker} {case_id}: Fichier approved manquant")
                continue

            with open(approved_path, "r", encoding="utf-8") as f:
                approved_output = f.read()

            if received_output == approved_output:
                results.append(f"✅ {case_id}: OK")
            else:
                results.append(f"❌ {case_id}: Différence détectée")

                # Sauvegarder le fichier received pour debug
                write_received(case)
                print(f"   received: {received_path(case_id)}")

        print("\n" + "="*50)
        print("RÉSULTATS DES TESTS D'APPROBATION")
        print("="*50)
        for result in results:
            print(result)
        print("="*50)

        failed_cases = [r for r in results if r.startswith("❌")]
        if failed_cases:
            self.fail(f"{len(failed_cases)} cas de test ont échoué:\n" + "\n".join(failed_cases))


if __name__ == "__main__":
    print("🔄 Génération des fichiers received...")
    from generate_received_files import main as generate_received
    generate_received()

    print("\n🧪 Lancement des tests d'approbation...")
    unittest.main(verbosity=2)
