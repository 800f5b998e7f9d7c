"""Build the small QM9-style property corpus shipped in data/.

The corpus is a seeded random enumeration of small organic molecules
(at most 9 heavy atoms drawn from C, N, O, F) grown from a fixed seed set.
Every canonical SMILES is restricted to the 30-token QM9 vocabulary.
Properties are computed with RDKit:

  MW     Descriptors.MolWt
  HBA    number of N and O atoms (Lipinski acceptor count)
  HBD    number of N and O atoms carrying at least one hydrogen
  nRot   single, acyclic bonds between two heavy atoms of degree >= 2
  nRing  rdMolDescriptors.CalcNumRings
  nHet   rdMolDescriptors.CalcNumHeteroatoms
  TPSA   Descriptors.TPSA
  logP   Crippen.MolLogP
  Stereo number of (assigned or unassigned) stereocenters

Usage: python3 scripts/make_sample_corpus.py data/qm9_style_sample.csv [count]
"""

import csv
import random
import sys

from rdkit import Chem, RDLogger
from rdkit.Chem import Crippen, Descriptors, rdMolDescriptors

RDLogger.DisableLog("rdApp.*")

VOCAB = (
    "# ( ) - 1 2 3 4 5 = C F N O [C-] [CH-] [N+] [N-] [NH+] [NH2+] [NH3+] "
    "[O-] [c-] [cH-] [n-] [nH+] [nH] c n o"
).split()
GREEDY = sorted(VOCAB, key=len, reverse=True)

SEEDS = [
    "C", "N", "O", "C#C", "C#N", "C=O", "CO", "CC", "CN", "CF", "OC=O", "NC=O",
    "c1ccoc1", "c1cc[nH]c1", "c1ccncc1", "c1cnoc1", "O=[N+]([O-])c1ccoc1",
    "CC(C)=O", "CC#N", "C1CC1", "C1CCO1", "C1CN1", "OCC(O)CO", "N#CC#N",
    "CC[NH3+]", "C[NH2+]C", "C[N-]C#N", "CC(=O)[O-]", "c1cc[n-]c1",
]
ELEMENTS = ["C", "C", "C", "N", "O", "F"]
PT = Chem.GetPeriodicTable()


def tokenizable(smiles):
    i = 0
    while i < len(smiles):
        for tok in GREEDY:
            if smiles.startswith(tok, i):
                i += len(tok)
                break
        else:
            return False
    return True


def free_valence(atom):
    return atom.GetNumImplicitHs() + atom.GetNumExplicitHs() if atom.GetFormalCharge() == 0 else 0


def mutate(mol, rng):
    rw = Chem.RWMol(mol)
    Chem.Kekulize(rw, clearAromaticFlags=True)
    op = rng.randrange(4)
    atoms = list(rw.GetAtoms())
    if op == 0:
        cands = [a.GetIdx() for a in atoms if free_valence(a) > 0]
        if not cands:
            return None
        src = rng.choice(cands)
        new = rw.AddAtom(Chem.Atom(rng.choice(ELEMENTS)))
        rw.AddBond(src, new, Chem.BondType.SINGLE)
    elif op == 1:
        bonds = [b for b in rw.GetBonds()
                 if free_valence(b.GetBeginAtom()) > 0 and free_valence(b.GetEndAtom()) > 0
                 and b.GetBondType() in (Chem.BondType.SINGLE, Chem.BondType.DOUBLE)]
        if not bonds:
            return None
        b = rng.choice(bonds)
        b.SetBondType(Chem.BondType.DOUBLE if b.GetBondType() == Chem.BondType.SINGLE
                      else Chem.BondType.TRIPLE)
    elif op == 2:
        dm = Chem.GetDistanceMatrix(rw)
        pairs = [(i, j) for i in range(len(atoms)) for j in range(i + 1, len(atoms))
                 if 2 <= dm[i][j] <= 5 and free_valence(atoms[i]) > 0 and free_valence(atoms[j]) > 0]
        if not pairs:
            return None
        i, j = rng.choice(pairs)
        rw.AddBond(i, j, Chem.BondType.SINGLE)
    else:
        neutral = [a for a in atoms if a.GetFormalCharge() == 0]
        if not neutral:
            return None
        a = rng.choice(neutral)
        a.SetAtomicNum(PT.GetAtomicNumber(rng.choice(ELEMENTS)))
        a.SetNoImplicit(False)
    try:
        m = rw.GetMol()
        Chem.SanitizeMol(m)
    except Exception:
        return None
    return m


def accept(mol):
    if mol.GetNumHeavyAtoms() > 9:
        return None
    if any(a.GetSymbol() not in "CNOF" for a in mol.GetAtoms()):
        return None
    smi = Chem.MolToSmiles(mol, isomericSmiles=False)
    if Chem.MolFromSmiles(smi) is None or not tokenizable(smi):
        return None
    return smi


def properties(smi):
    m = Chem.MolFromSmiles(smi)
    hba = sum(1 for a in m.GetAtoms() if a.GetSymbol() in ("N", "O"))
    hbd = sum(1 for a in m.GetAtoms() if a.GetSymbol() in ("N", "O") and a.GetTotalNumHs() > 0)
    rot = len(m.GetSubstructMatches(Chem.MolFromSmarts("[!D1]-&!@[!D1]")))
    stereo = len(Chem.FindMolChiralCenters(m, includeUnassigned=True, useLegacyImplementation=False))
    return [
        round(Descriptors.MolWt(m), 3), hba, hbd, rot,
        rdMolDescriptors.CalcNumRings(m), rdMolDescriptors.CalcNumHeteroatoms(m),
        round(Descriptors.TPSA(m), 3), round(Crippen.MolLogP(m), 4), stereo,
    ]


def main():
    out = sys.argv[1]
    count = int(sys.argv[2]) if len(sys.argv) > 2 else 1200
    rng = random.Random(20250101)
    pool = []
    seen = set()
    for s in SEEDS:
        smi = accept(Chem.MolFromSmiles(s))
        if smi and smi not in seen:
            seen.add(smi)
            pool.append(smi)
    attempts = 0
    while len(pool) < count and attempts < 2_000_000:
        attempts += 1
        parent = Chem.MolFromSmiles(rng.choice(pool))
        child = mutate(parent, rng)
        if child is None:
            continue
        smi = accept(child)
        if smi and smi not in seen:
            seen.add(smi)
            pool.append(smi)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["SMILES", "MW", "HBA", "HBD", "nRot", "nRing", "nHet", "TPSA", "logP", "Stereo"])
        for smi in pool:
            w.writerow([smi] + properties(smi))


if __name__ == "__main__":
    main()
